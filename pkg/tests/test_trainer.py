import json

import numpy as np
import pytest

from selva_lab.errors import ConfigError, DivergenceError, UsageError
from selva_lab.trainer import (
    TrainConfig,
    _Monitor,
    heldout_loss,
    load_generator,
    load_student,
    new_student,
    train_joint,
    train_stage1,
    train_stage2,
)
from selva_lab.world import build_world, generate_scenes

S1 = TrainConfig(stage=1, steps=3, batch_size=2, seed=4)
S2 = TrainConfig(stage=2, steps=4, batch_size=2, seed=4, feature_pool=8)


@pytest.fixture(scope="module")
def world():
    return build_world(4, 2, 11)


@pytest.fixture(scope="module")
def scenes(world):
    return generate_scenes(world, 16, "train")


@pytest.fixture(scope="module")
def stage1_dir(world, scenes, tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    train_stage1(S1, world, scenes, out_dir=out)
    return out


def test_defaults():
    assert TrainConfig(stage=1).total_steps == 2000
    assert TrainConfig(stage=2).total_steps == 3000
    c = TrainConfig()
    assert (c.lr, c.batch_size, c.warmup_steps, c.beta1, c.beta2, c.weight_decay, c.clip_norm) == \
        (1e-3, 8, 100, 0.9, 0.95, 1e-6, 1.0)
    assert (c.mix_prob, c.lam_clip, c.p_joint_drop, c.p_text_drop, c.sigma_rel, c.n_sup) == \
        (0.75, 0.2, 0.1, 0.5, 0.05, 5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stage=3)
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"stage": 1, "bogus": 2})
    assert TrainConfig.from_mapping({"stage": 2, "steps": 7}).total_steps == 7


def test_zero_steps_checkpoint_equals_init(world, scenes, tmp_path):
    cfg = TrainConfig(stage=1, steps=0, seed=2)
    res = train_stage1(cfg, world, scenes, out_dir=tmp_path)
    fresh = new_student(world, cfg)
    loaded = load_student(tmp_path)
    assert res.losses == []
    for name, t in fresh.store.items():
        assert np.array_equal(loaded.store[name].data, t.data), name


def test_stage1_touches_only_head(world, scenes):
    cfg = TrainConfig(stage=1, steps=2, batch_size=2, seed=1)
    init = new_student(world, cfg).store.state()
    res = train_stage1(cfg, world, scenes)
    changed = {n for n, t in res.student.store.items() if not np.array_equal(t.data, init[n])}
    assert changed
    assert all(n.startswith(("xattn.", "text.", "sup", "pool.")) for n in changed), changed
    assert res.generator is None


def test_stage1_determinism(world, scenes):
    a = train_stage1(S1, world, scenes)
    b = train_stage1(S1, world, scenes)
    assert a.losses == b.losses
    for n, t in a.student.store.items():
        assert np.array_equal(t.data, b.student.store[n].data)


def test_stage1_outputs(stage1_dir):
    manifest = json.loads((stage1_dir / "run_manifest.json").read_text())
    assert manifest["parameters"]["trainable_fraction"] < 1.0
    assert len(manifest["losses_per_100"]) == 1
    lines = (stage1_dir / "loss.csv").read_text().strip().splitlines()
    assert lines[0].split(",")[:2] == ["step", "loss"] and len(lines) == 4


def test_heldout_loss_is_deterministic(world, scenes, stage1_dir):
    student = load_student(stage1_dir)
    assert heldout_loss(student, world, scenes, n=4) == heldout_loss(student, world, scenes, n=4)


def test_stage2_requires_student(world, scenes):
    with pytest.raises(UsageError):
        train_stage2(S2, world, None, scenes)
    with pytest.raises(UsageError):
        train_stage1(S2, world, scenes)


def test_stage2_freezes_encoder_and_backbone(world, scenes, stage1_dir, tmp_path):
    before = load_student(stage1_dir).store.state()
    res = train_stage2(S2, world, stage1_dir, scenes, out_dir=tmp_path)
    for n, t in res.student.store.items():
        assert np.array_equal(t.data, before[n]), n
    from selva_lab.generator import is_stage2_trainable
    from selva_lab.trainer import new_generator

    init = new_generator(world, res.student, S2).store.state()
    for n, t in res.generator.store.items():
        if not is_stage2_trainable(n):
            assert np.array_equal(t.data, init[n]), n


def test_stage2_ema_differs_from_live(world, scenes, stage1_dir):
    res = train_stage2(S2, world, stage1_dir, scenes)
    assert res.ema.decay == 0.0 or any(
        not np.array_equal(res.ema.shadow[n], t.data) for n, t in res.generator.store.trainable().items())
    longer = train_stage2(TrainConfig(stage=2, steps=40, batch_size=2, feature_pool=8), world, stage1_dir, scenes)
    assert longer.ema.decay > 0
    assert any(not np.array_equal(longer.ema.shadow[n], t.data)
               for n, t in longer.generator.store.trainable().items())


def test_stage2_on_the_fly_matches_contract(world, scenes, stage1_dir):
    res = train_stage2(TrainConfig(stage=2, steps=2, batch_size=2, feature_pool=0), world, stage1_dir, scenes)
    assert len(res.losses) == 2 and all(np.isfinite(res.losses))


def test_stage2_determinism(world, scenes, stage1_dir):
    a = train_stage2(S2, world, stage1_dir, scenes)
    b = train_stage2(S2, world, stage1_dir, scenes)
    assert a.losses == b.losses


def test_generator_checkpoint_round_trip(world, scenes, stage1_dir, tmp_path):
    res = train_stage2(S2, world, stage1_dir, scenes, out_dir=tmp_path / "gen")
    live, student, meta = load_generator(tmp_path / "gen", use_ema=False)
    for n, t in res.generator.store.items():
        assert np.array_equal(live.store[n].data, t.data)
    ema, _, _ = load_generator(tmp_path / "gen", use_ema=True)
    for n, v in res.ema.shadow.items():
        assert np.array_equal(ema.store[n].data, v)
    assert meta["student_digest"]
    assert not any(t.requires_grad for _, t in live.store.items())
    manifest = json.loads((tmp_path / "gen" / "run_manifest.json").read_text())
    assert manifest["student_run_manifest_sha256"]


def test_monitor_triggers_after_patience():
    mon = _Monitor(TrainConfig(divergence_patience=100))
    mon.check(0, 1.0)
    for step in range(1, 100):
        mon.check(step, 11.0)
    with pytest.raises(DivergenceError, match="consecutive"):
        mon.check(100, 11.0)


def test_monitor_resets_streak():
    mon = _Monitor(TrainConfig(divergence_patience=5))
    mon.check(0, 1.0)
    for step in range(1, 50):
        mon.check(step, 11.0 if step % 4 else 1.0)
    with pytest.raises(DivergenceError):
        mon.check(50, float("nan"))


def test_training_divergence_aborts(world, scenes):
    cfg = TrainConfig(stage=1, steps=20, batch_size=2, divergence_factor=1e-6, divergence_patience=3)
    with pytest.raises(DivergenceError):
        train_stage1(cfg, world, scenes)


def test_joint_training_updates_both(world, scenes, tmp_path):
    cfg = TrainConfig(stage=2, steps=2, batch_size=2, joint_training=True)
    init = new_student(world, cfg).store.state()
    res = train_joint(cfg, world, scenes, out_dir=tmp_path)
    assert any(not np.array_equal(t.data, init[n]) for n, t in res.student.store.items())
    gen, student, _ = load_generator(tmp_path)
    assert student.store["sup"].shape == res.student.store["sup"].shape
