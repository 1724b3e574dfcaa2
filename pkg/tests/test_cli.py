import json
from pathlib import Path

import numpy as np
import pytest

from selva_lab.cli import main, read_config_file, resolve_options
from selva_lab.errors import ConfigError
from selva_lab.serialize import file_sha256, load_tensor
from selva_lab.trainer import TrainConfig, load_student, new_student
from selva_lab.world import load_dataset

SMALL_WORLD = ["--train-scenes", "16", "--val-scenes", "4", "--test-scenes", "24", "--quota", "5"]
FAST_TRAIN = ["--steps", "2", "--batch-size", "2", "--feature-pool", "4"]


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """data -> stage 1 -> stage 2 built through the command line."""
    root = tmp_path_factory.mktemp("cli")
    data, s1, s2 = root / "data", root / "s1", root / "s2"
    assert main(["gen-world", "--out", str(data), "--seed", "3", *SMALL_WORLD]) == 0
    assert main(["train", "--data", str(data), "--out", str(s1), "--stage", "1", *FAST_TRAIN]) == 0
    assert main(["train", "--data", str(data), "--out", str(s2), "--stage", "2", "--student-ckpt", str(s1),
                 *FAST_TRAIN]) == 0
    return data, s1, s2


def test_gen_world_defaults():
    opts = resolve_options("gen-world", {}, None)
    assert (opts["classes"], opts["categories"]) == (12, 4)
    sample = resolve_options("sample", {}, None)
    assert (sample["gamma"], sample["steps"]) == (4.5, 25)


def test_gen_world_default_benchmarks(pipeline_dirs):
    data = pipeline_dirs[0]
    world, splits, benches, meta = load_dataset(data)
    assert world.config.n_classes == 12 and world.config.n_categories == 4
    assert len(benches["inter"]) == 20 and len(benches["intra"]) == 20
    assert meta["benchmarks"]["inter"]["pairs"] == 20


def test_gen_world_byte_identical(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen-world", "--out", "a", "--seed", "1", *SMALL_WORLD]) == 0
    assert main(["gen-world", "--out", "b", "--seed", "1", *SMALL_WORLD]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    assert main(["gen-world", "--out", "c", "--seed", "2", *SMALL_WORLD]) == 0
    assert _tree(tmp_path / "a") != _tree(tmp_path / "c")


def test_two_class_world_warns(tmp_path, capsys):
    rc = main(["gen-world", "--out", str(tmp_path / "d"), "--classes", "2", "--categories", "2",
               "--train-scenes", "4", "--val-scenes", "2", "--test-scenes", "6", "--quota", "2"])
    assert rc == 0
    assert "intra benchmark is empty" in capsys.readouterr().err
    assert (tmp_path / "d" / "benchmark_intra.jsonl").read_text() == ""


def test_stage2_without_student_is_usage_error(pipeline_dirs, tmp_path, capsys):
    rc = main(["train", "--data", str(pipeline_dirs[0]), "--out", str(tmp_path / "x"), "--stage", "2"])
    assert rc == 2
    assert "--student-ckpt" in capsys.readouterr().err


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-world", "--out", str(blocker / "sub"), *SMALL_WORLD]) == 3


def test_missing_dataset_is_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_bad_arguments_are_usage_errors(tmp_path):
    assert main(["train", "--stage", "x"]) == 2
    assert main(["nope"]) == 2
    assert main(["gen-world"]) == 2


def test_numeric_failure_exit_code(pipeline_dirs, tmp_path):
    rc = main(["train", "--data", str(pipeline_dirs[0]), "--out", str(tmp_path / "n"), "--stage", "1",
               "--lr", "nan", "--steps", "3", "--batch-size", "2"])
    assert rc == 4


def test_config_file_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nclasses = 6\ncategories=3\nquota=7\n")
    opts = resolve_options("gen-world", {"classes": 8}, str(cfg))
    assert (opts["classes"], opts["categories"], opts["quota"], opts["train_scenes"]) == (8, 3, 7, 240)
    cfg.write_text("bogus=1\n")
    with pytest.raises(ConfigError):
        resolve_options("gen-world", {}, str(cfg))
    assert read_config_file(tmp_path / "run.cfg") == {"bogus": "1"}


def test_env_seed(monkeypatch):
    monkeypatch.setenv("SELVA_LAB_SEED", "17")
    assert resolve_options("gen-world", {}, None)["seed"] == 17
    assert resolve_options("gen-world", {"seed": 2}, None)["seed"] == 2
    monkeypatch.setenv("SELVA_LAB_SEED", "abc")
    assert main(["gen-world", "--out", "unused"]) == 2


def test_train_steps_zero_is_init(pipeline_dirs, tmp_path):
    out = tmp_path / "z"
    assert main(["train", "--data", str(pipeline_dirs[0]), "--out", str(out), "--steps", "0", "--seed", "9"]) == 0
    world = load_dataset(pipeline_dirs[0])[0]
    fresh = new_student(world, TrainConfig(seed=9))
    loaded = load_student(out)
    assert all(np.array_equal(loaded.store[n].data, t.data) for n, t in fresh.store.items())


def test_joint_training_flag(pipeline_dirs, tmp_path):
    out = tmp_path / "j"
    assert main(["train", "--data", str(pipeline_dirs[0]), "--out", str(out), "--joint-training",
                 "--steps", "1", "--batch-size", "2"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["joint_training"] is True and (out / "student" / "manifest.json").exists()


def test_sample_outputs_and_determinism(pipeline_dirs, tmp_path):
    data, _, s2 = pipeline_dirs
    args = ["sample", "--ckpt", str(s2), "--data", str(data), "--video", "inter:0", "--text", "class_03",
            "--steps", "3", "--seed", "5"]
    assert main([*args, "--out", str(tmp_path / "a"), "--viz-attn"]) == 0
    assert main([*args, "--out", str(tmp_path / "b"), "--viz-attn"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    record = json.loads((tmp_path / "a" / "sample.jsonl").read_text())
    assert record["gamma"] == 4.5 and record["steps"] == 3 and record["seed"] == 5
    assert (tmp_path / "a" / "attention.pgm").read_bytes().startswith(b"P5")
    assert main([*args, "--out", str(tmp_path / "g1"), "--gamma", "1"]) == 0
    a = load_tensor(tmp_path / "a" / "latent.slvt")
    g1 = load_tensor(tmp_path / "g1" / "latent.slvt")
    assert np.linalg.norm(a - g1) > 0


def test_sample_default_sidecar(pipeline_dirs, tmp_path):
    data, _, s2 = pipeline_dirs
    assert main(["sample", "--ckpt", str(s2), "--data", str(data), "--video", "inter:1", "--text", "class_01",
                 "--out", str(tmp_path / "d")]) == 0
    record = json.loads((tmp_path / "d" / "sample.jsonl").read_text())
    assert (record["gamma"], record["steps"]) == (4.5, 25)


def test_sample_unknown_token(pipeline_dirs, tmp_path):
    data, _, s2 = pipeline_dirs
    rc = main(["sample", "--ckpt", str(s2), "--data", str(data), "--video", "inter:0", "--text", "class_99",
               "--out", str(tmp_path / "u")])
    assert rc == 2


def test_eval_oracle(pipeline_dirs, tmp_path):
    out = tmp_path / "o"
    assert main(["eval", "--data", str(pipeline_dirs[0]), "--out", str(out), "--use-ground-truth"]) == 0
    report = json.loads((out / "report.json").read_text())
    for subset in ("inter", "intra"):
        r = report["subsets"][subset]
        assert r["selection_accuracy"] == 1.0 and r["desync"] == 0.0
        assert r["fad"] < 1e-6 and r["kl"] < 1e-12 and abs(r["kad"]) < 0.05


def test_eval_missing_benchmark_is_usage_error(pipeline_dirs, tmp_path):
    assert main(["eval", "--data", str(pipeline_dirs[0]), "--out", str(tmp_path / "m"), "--use-ground-truth",
                 "--subsets", "cross"]) == 2


def test_manifest_chain_and_rerun(pipeline_dirs, tmp_path):
    data, s1, s2 = pipeline_dirs
    run = ["eval", "--data", str(data), "--ckpt", str(s2), "--steps", "2", "--subsets", "inter"]
    assert main([*run, "--out", str(tmp_path / "e1")]) == 0
    assert main([*run, "--out", str(tmp_path / "e2")]) == 0
    assert (tmp_path / "e1" / "report.json").read_bytes() == (tmp_path / "e2" / "report.json").read_bytes()
    eval_manifest = json.loads((tmp_path / "e1" / "eval_manifest.json").read_text())
    s2_manifest = json.loads((s2 / "run_manifest.json").read_text())
    s1_manifest = json.loads((s1 / "run_manifest.json").read_text())
    assert eval_manifest["train_manifest_sha256"] == file_sha256(s2 / "run_manifest.json")
    assert s2_manifest["student_run_manifest_sha256"] == file_sha256(s1 / "run_manifest.json")
    assert s2_manifest["data_manifest_sha256"] == s1_manifest["data_manifest_sha256"] \
        == file_sha256(data / "manifest.json")


def test_sweep_sup(pipeline_dirs, tmp_path):
    out = tmp_path / "sw"
    rc = main(["eval", "--data", str(pipeline_dirs[0]), "--out", str(out), "--sweep-sup", "0,2",
               "--sweep-stage1-steps", "1", "--sweep-stage2-steps", "1", "--steps", "1", "--subsets", "inter"])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["n_sup"] for r in report["sweep"]] == [0, 2]
    assert (out / "sweep" / "sup2" / "generator" / "manifest.json").exists()
