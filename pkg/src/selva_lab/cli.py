"""``selva-lab`` command line: gen-world, train, sample, eval.

Option values resolve as command-line flag, then ``--config`` file (flat
``key=value`` lines), then built-in default.  ``SELVA_LAB_SEED`` replaces the
built-in default seed.  Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .errors import BenchmarkError, ConfigError, NumericError, SelvaError, UsageError
from .evaluate import (
    GroundTruthGenerator,
    SelectivePipeline,
    format_table,
    run_benchmark,
    validate_report,
)
from .generator import SamplerConfig
from .metrics import ToyEmbedder
from .serialize import (
    build_id,
    ensure_writable,
    file_sha256,
    load_tensor,
    save_tensor,
    write_json,
    write_jsonl,
)
from .text import Vocabulary
from .trainer import TrainConfig, load_student, train_joint, train_stage1, train_stage2
from .video import attention_map, write_pgm
from .world import (
    benchmark_records,
    build_benchmark,
    build_world,
    generate_scenes,
    load_dataset,
    write_scenes,
)

log = logging.getLogger("selva_lab")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _int_list(v) -> list[int]:
    if isinstance(v, list):
        return v
    try:
        return [int(x) for x in str(v).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {v!r}") from None


def _default_seed() -> int:
    raw = os.environ.get("SELVA_LAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"SELVA_LAB_SEED must be an integer, got {raw!r}") from None


# name -> (type, default, help); ``None`` defaults are resolved later
COMMON = {
    "seed": (int, None, "master seed (default: $SELVA_LAB_SEED or 0)"),
    "jobs": (int, 1, "cap on internal parallelism"),
}
OPTIONS = {
    "gen-world": {
        "out": (str, None, "output dataset directory"),
        "classes": (int, 12, "number of event classes"),
        "categories": (int, 4, "number of categories"),
        "train_scenes": (int, 240, "training scenes"),
        "val_scenes": (int, 48, "held-out scenes"),
        "test_scenes": (int, 120, "benchmark scenes"),
        "quota": (int, 25, "benchmark pairs per category and mode"),
    },
    "train": {
        "data": (str, None, "dataset directory from gen-world"),
        "out": (str, None, "checkpoint directory"),
        "stage": (int, 1, "1 = distillation, 2 = flow matching"),
        "student_ckpt": (str, None, "stage-1 checkpoint (required for stage 2)"),
        "steps": (int, None, "optimizer steps (default 2000 / 3000)"),
        "batch_size": (int, 8, "batch size"),
        "lr": (float, 1e-3, "peak learning rate"),
        "warmup_steps": (int, 100, "linear warmup steps"),
        "n_sup": (int, 5, "supplementary tokens"),
        "mix_prob": (float, 0.75, "auto-mix probability"),
        "feature_pool": (int, 2048, "stage-2 precomputed feature pool (0 = on the fly)"),
        "joint_training": (_bool, False, "optimize both losses jointly in one stage"),
    },
    "sample": {
        "ckpt": (str, None, "generator checkpoint directory"),
        "video": (str, None, "SLVT video tensor, or '<inter|intra>:<pair_id>' with --data"),
        "text": (str, None, "caption tokens, space or comma separated"),
        "data": (str, None, "dataset directory (for benchmark references)"),
        "out": (str, None, "output directory"),
        "gamma": (float, 4.5, "guidance strength"),
        "steps": (int, 25, "Euler steps"),
        "guidance": (str, "joint", "joint | three"),
        "viz_attn": (_bool, False, "also export the attention heat map"),
        "no_ema": (_bool, False, "use live weights instead of the EMA shadow"),
    },
    "eval": {
        "data": (str, None, "dataset directory"),
        "ckpt": (str, None, "generator checkpoint directory"),
        "out": (str, None, "report directory"),
        "gamma": (float, 4.5, "guidance strength"),
        "steps": (int, 25, "Euler steps"),
        "repeats": (int, 1, "generations per pair"),
        "subsets": (str, "inter,intra", "benchmark subsets"),
        "use_ground_truth": (_bool, False, "score ground-truth latents (oracle generator)"),
        "no_ema": (_bool, False, "use live weights instead of the EMA shadow"),
        "sweep_sup": (_int_list, None, "retrain and evaluate per [SUP] count, e.g. 0,1,3,5,7"),
        "sweep_stage1_steps": (int, 2000, "stage-1 steps per sweep point"),
        "sweep_stage2_steps": (int, 3000, "stage-2 steps per sweep point"),
    },
}
FLAGS = {"joint_training", "viz_attn", "no_ema", "use_ground_truth"}


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; dashes in keys read as underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_options(command: str, cli: dict, config_path: str | None) -> dict:
    spec = {**COMMON, **OPTIONS[command]}
    file_values = read_config_file(config_path) if config_path else {}
    unknown = set(file_values) - set(spec)
    if unknown:
        raise ConfigError(f"unknown keys in config file for {command}: {sorted(unknown)}")
    resolved = {}
    for name, (typ, default, _) in spec.items():
        if cli.get(name) is not None:
            resolved[name] = cli[name]
        elif name in file_values:
            resolved[name] = typ(file_values[name])
        else:
            resolved[name] = default
    if resolved["seed"] is None:
        resolved["seed"] = _default_seed()
    return resolved


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selva-lab", description="Selective video-to-audio toy pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="flat key=value config file")
        for name, (typ, _, help_) in {**COMMON, **options}.items():
            flag = "--" + name.replace("_", "-")
            if name in FLAGS:
                p.add_argument(flag, dest=name, action="store_const", const=True, default=None, help=help_)
            else:
                p.add_argument(flag, dest=name, type=typ, default=None, help=help_)
    return parser


def _require(opts: dict, *names) -> None:
    for name in names:
        if opts.get(name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


# -- commands -------------------------------------------------------------------------------

def cmd_gen_world(opts: dict) -> dict:
    _require(opts, "out")
    out = ensure_writable(opts["out"])
    world = build_world(opts["classes"], opts["categories"], opts["seed"])
    splits = {"train": opts["train_scenes"], "val": opts["val_scenes"], "test": opts["test_scenes"]}
    records, scenes = [], {}
    for split, count in splits.items():
        scenes[split] = generate_scenes(world, count, split, jobs=opts["jobs"])
        records += write_scenes(out, scenes[split])
    write_jsonl(out / "scenes.jsonl", records)
    Vocabulary.for_classes(world.config.n_classes).save(out / "vocab.txt")
    bench_counts = {}
    for mode in ("inter", "intra"):
        try:
            pairs = build_benchmark(scenes["test"], mode, opts["quota"], opts["seed"])
        except BenchmarkError as exc:
            log.warning("%s benchmark is empty: %s", mode, exc)
            print(f"warning: {mode} benchmark is empty ({exc})", file=sys.stderr)
            pairs = []
        write_jsonl(out / f"benchmark_{mode}.jsonl", benchmark_records(pairs))
        bench_counts[mode] = {"pairs": len(pairs), "duplicates": sum(p.duplicate for p in pairs)}
    manifest = {"kind": "data", "seed": opts["seed"], "build_id": build_id(), "world_config": asdict(world.config),
                "splits": splits, "benchmarks": bench_counts,
                "scenes_sha256": file_sha256(out / "scenes.jsonl")}
    write_json(out / "manifest.json", manifest)
    print(f"wrote {sum(splits.values())} scenes, {world.config.n_classes} classes in "
          f"{world.config.n_categories} categories; inter={bench_counts['inter']['pairs']} "
          f"intra={bench_counts['intra']['pairs']} pairs -> {out}")
    return manifest


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    if not (Path(path) / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {path} (run gen-world first)")
    return load_dataset(path)


def _train_config(opts: dict, stage: int, **extra) -> TrainConfig:
    return TrainConfig(stage=stage, steps=opts.get("steps"), batch_size=opts.get("batch_size", 8),
                       lr=opts.get("lr", 1e-3), warmup_steps=opts.get("warmup_steps", 100),
                       n_sup=opts.get("n_sup", 5), mix_prob=opts.get("mix_prob", 0.75),
                       feature_pool=opts.get("feature_pool", 2048),
                       joint_training=bool(opts.get("joint_training")), seed=opts["seed"], **extra)


def cmd_train(opts: dict) -> dict:
    _require(opts, "out")
    stage = opts["stage"]
    if stage not in (1, 2):
        raise UsageError("--stage must be 1 or 2")
    if stage == 2 and not opts["joint_training"] and not opts["student_ckpt"]:
        raise UsageError("stage 2 needs --student-ckpt (the output directory of a stage-1 run)")
    world, splits, _, data_meta = _load_data(opts["data"])
    chain = {"data_manifest_sha256": file_sha256(Path(opts["data"]) / "manifest.json")}
    train = splits.get("train", [])
    if opts["joint_training"]:
        result = train_joint(_train_config(opts, 2), world, train, out_dir=opts["out"], extra_manifest=chain)
    elif stage == 1:
        result = train_stage1(_train_config(opts, 1), world, train, out_dir=opts["out"], extra_manifest=chain)
    else:
        ckpt = Path(opts["student_ckpt"])
        if not (ckpt / "manifest.json").exists():
            raise UsageError(f"--student-ckpt {ckpt} is not a checkpoint directory")
        student = load_student(ckpt)
        cfg = _train_config(opts, 2)
        if student.config.n_sup != cfg.n_sup:
            cfg = replace(cfg, n_sup=student.config.n_sup)
        result = train_stage2(cfg, world, student, train, out_dir=opts["out"], student_checkpoint=ckpt,
                              extra_manifest=chain)
    m = result.manifest
    print(f"trained {len(result.losses)} steps; loss {m['initial_loss']} -> {m['final_loss']}; "
          f"trainable {m['parameters']['trainable']}/{m['parameters']['total']} -> {opts['out']}")
    return m


def _parse_caption(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def cmd_sample(opts: dict) -> dict:
    _require(opts, "ckpt", "video", "text", "out")
    pipe = SelectivePipeline.from_checkpoint(opts["ckpt"], use_ema=not opts["no_ema"])
    ref = opts["video"]
    if Path(ref).is_file():
        video = load_tensor(ref)
    elif ":" in ref:
        mode, pid = ref.split(":", 1)
        _, _, benches, _ = _load_data(opts["data"])
        matches = [p for p in benches.get(mode, []) if str(p.pair_id) == pid]
        if not matches:
            raise UsageError(f"no {mode} benchmark pair with id {pid}")
        video = matches[0].video
    else:
        raise FileNotFoundError(f"video {ref!r} is neither a file nor a '<mode>:<pair_id>' reference")
    caption = _parse_caption(opts["text"])
    ids = pipe.student.text.token_ids(caption)  # raises VocabularyError on unknown tokens
    sampler = SamplerConfig(steps=opts["steps"], gamma=opts["gamma"], guidance=opts["guidance"])
    latent = pipe.generate_videos(video[None], [caption], sampler, [opts["seed"]])[0]
    out = ensure_writable(opts["out"])
    save_tensor(out / "latent.slvt", latent)
    record = {"seed": opts["seed"], "gamma": sampler.gamma, "steps": sampler.steps, "guidance": sampler.guidance,
              "video": ref, "text": caption, "token_ids": list(ids), "ema": not opts["no_ema"],
              "generator_run_manifest_sha256": _sha_or_none(Path(opts["ckpt"]) / "run_manifest.json")}
    if opts["viz_attn"]:
        heat = attention_map(pipe.attention(video, caption))
        save_tensor(out / "attention.slvt", heat)
        write_pgm(out / "attention.pgm", heat)
        record["attention"] = "attention.pgm"
    write_jsonl(out / "sample.jsonl", [record])
    print(f"sampled latent {latent.shape} (gamma={sampler.gamma}, steps={sampler.steps}) -> {out}")
    return record


def _sha_or_none(path: Path):
    return file_sha256(path) if path.exists() else None


def _evaluate_subsets(generator, benches, subsets, sampler, embedder, seed, repeats, jobs) -> dict:
    def one(subset):
        pairs = benches.get(subset) or []
        if not pairs:
            raise UsageError(f"benchmark subset {subset!r} is missing or empty in the dataset")
        return subset, run_benchmark(generator, pairs, sampler, embedder, subset, seed, repeats)

    if jobs > 1 and len(subsets) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, subsets))
    else:
        results = [one(s) for s in subsets]
    return dict(results)


def _sweep(opts: dict, world, splits, benches, sampler, embedder, subsets, out: Path, chain: dict) -> list:
    rows = []
    for n_sup in opts["sweep_sup"]:
        if n_sup < 0:
            raise UsageError("--sweep-sup counts must be non-negative")
        base = out / "sweep" / f"sup{n_sup}"
        cfg1 = TrainConfig(stage=1, steps=opts["sweep_stage1_steps"], n_sup=n_sup, seed=opts["seed"])
        r1 = train_stage1(cfg1, world, splits["train"], out_dir=base / "student", extra_manifest=chain)
        cfg2 = TrainConfig(stage=2, steps=opts["sweep_stage2_steps"], n_sup=n_sup, seed=opts["seed"])
        train_stage2(cfg2, world, r1.student, splits["train"], out_dir=base / "generator",
                     student_checkpoint=base / "student", extra_manifest=chain)
        pipe = SelectivePipeline.from_checkpoint(base / "generator", use_ema=not opts["no_ema"])
        reports = _evaluate_subsets(pipe, benches, subsets, sampler, embedder, opts["seed"], opts["repeats"], 1)
        for subset, rep in reports.items():
            rows.append({"n_sup": n_sup, "subset": subset, "text_sim": rep.text_sim, "desync": rep.desync,
                         "desync_median": rep.desync_median, "selection_accuracy": rep.selection_accuracy})
    return rows


def format_sweep(rows: list) -> str:
    lines = [f"{'n_sup':>6}  {'subset':>6}  {'text_sim':>9}  {'desync':>8}  {'desync_med':>10}  {'select':>7}"]
    for r in rows:
        lines.append(f"{r['n_sup']:>6}  {r['subset']:>6}  {r['text_sim']:>9.4f}  {r['desync']:>8.3f}  "
                     f"{r['desync_median']:>10.3f}  {r['selection_accuracy']:>7.3f}")
    return "\n".join(lines)


def cmd_eval(opts: dict) -> dict:
    _require(opts, "out")
    world, splits, benches, _ = _load_data(opts["data"])
    subsets = [s.strip() for s in opts["subsets"].split(",") if s.strip()]
    for s in subsets:
        if s not in ("inter", "intra"):
            raise UsageError(f"unknown subset {s!r}")
        if not (Path(opts["data"]) / f"benchmark_{s}.jsonl").exists():
            raise UsageError(f"missing benchmark_{s}.jsonl in {opts['data']}")
    sampler = SamplerConfig(steps=opts["steps"], gamma=opts["gamma"])
    embedder = ToyEmbedder(world)
    out = ensure_writable(opts["out"])
    chain = {"data_manifest_sha256": file_sha256(Path(opts["data"]) / "manifest.json")}
    report = {"kind": "eval", "seed": opts["seed"], "build_id": build_id(), "sampler": asdict(sampler),
              "oracle": bool(opts["use_ground_truth"]), "subsets": {}}
    if opts["sweep_sup"] is not None:
        rows = _sweep(opts, world, splits, benches, sampler, embedder, subsets, out, chain)
        report["sweep"] = rows
        table = format_sweep(rows)
    else:
        if opts["use_ground_truth"]:
            generator = GroundTruthGenerator()
        else:
            _require(opts, "ckpt")
            generator = SelectivePipeline.from_checkpoint(opts["ckpt"], use_ema=not opts["no_ema"])
            chain["train_manifest_sha256"] = _sha_or_none(Path(opts["ckpt"]) / "run_manifest.json")
        reports = _evaluate_subsets(generator, benches, subsets, sampler, embedder, opts["seed"],
                                    opts["repeats"], opts["jobs"])
        report["subsets"] = {k: v.to_dict() for k, v in reports.items()}
        table = format_table(list(reports.values()))
    validate_report(report)
    write_json(out / "report.json", report)
    manifest = {"kind": "eval", "seed": opts["seed"], "build_id": build_id(),
                "options": {k: v for k, v in opts.items() if k != "jobs"},
                "report_sha256": file_sha256(out / "report.json"), **chain}
    write_json(out / "eval_manifest.json", manifest)
    print(table)
    return report


COMMANDS = {"gen-world": cmd_gen_world, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage problems with exit status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cli_values = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        opts = resolve_options(args.command, cli_values, args.config)
        COMMANDS[args.command](opts)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SelvaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (EXIT_USAGE, EXIT_NUMERIC) else EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
