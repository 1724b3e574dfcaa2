"""Two-stage training: student distillation, then flow matching with the student frozen."""
from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DivergenceError, UsageError
from .generator import ConditionSet, GeneratorConfig, GeneratorNet, cfm_loss, drop_conditions
from .optim import EmaState, OptimizerState, adamw_step, ema_update, lr_schedule
from .serialize import (
    build_id,
    csv_text,
    ensure_writable,
    file_sha256,
    load_checkpoint,
    save_checkpoint,
    write_json,
)
from .tensor import Tensor
from .text import Vocabulary
from .video import EncoderConfig, StudentEncoder, TeacherEncoder, distill_loss
from .world import LEFT, RIGHT, MixedSample, Scene, World, WorldConfig, auto_mix, generate_scenes, sample_mix_ratio

log = logging.getLogger(__name__)

STAGE_STEPS = {1: 2000, 2: 3000}


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    steps: int | None = None          # None -> 2000 for stage 1, 3000 otherwise
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.95
    clip_norm: float = 1.0
    mix_prob: float = 0.75
    mix_alpha: float = 1.0
    lam_clip: float = 0.2
    clip_mode: str = "clip"
    n_sup: int = 5
    p_joint_drop: float = 0.1
    p_text_drop: float = 0.5
    sigma_rel: float = 0.05
    feature_pool: int = 2048          # 0 encodes every stage-2 batch on the fly
    joint_training: bool = False
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.n_sup < 0:
            raise ConfigError("n_sup must be non-negative")

    @property
    def total_steps(self) -> int:
        return STAGE_STEPS.get(self.stage, 3000) if self.steps is None else self.steps

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**values)


def encoder_config_for(world: WorldConfig, n_sup: int = 5, **overrides) -> EncoderConfig:
    return EncoderConfig(frames=world.frames, patch=world.patch, width=world.patch, d_patch=world.d_patch,
                         n_classes=world.n_classes, n_sup=n_sup, **overrides)


def generator_config_for(world: WorldConfig, enc: EncoderConfig, **overrides) -> GeneratorConfig:
    return GeneratorConfig(audio_len=world.audio_len, d_audio=world.d_audio, frames=world.frames,
                           d_video=enc.dim, d_text=enc.d_text, **overrides)


@dataclass
class TrainResult:
    losses: list
    manifest: dict
    student: StudentEncoder | None = None
    generator: GeneratorNet | None = None
    ema: EmaState | None = None
    checkpoint: Path | None = None


# -- batches --------------------------------------------------------------------

class MixSampler:
    """Draws auto-mixed training samples; the pair always has a different class."""

    def __init__(self, scenes: list[Scene], config: TrainConfig, gen: np.random.Generator):
        if len({s.class_id for s in scenes}) < 2:
            raise ConfigError("training needs scenes from at least two classes")
        self.scenes, self.config, self.gen = scenes, config, gen

    def draw(self, mix_prob: float | None = None) -> MixedSample:
        c, g, sc = self.config, self.gen, self.scenes
        target = sc[int(g.integers(len(sc)))]
        pair = sc[int(g.integers(len(sc)))]
        while pair.class_id == target.class_id:
            pair = sc[int(g.integers(len(sc)))]
        lam = sample_mix_ratio(c.mix_alpha, c.lam_clip, g, c.clip_mode)
        side = LEFT if g.random() < 0.5 else RIGHT
        return auto_mix(target, pair, lam, side, c.mix_prob if mix_prob is None else mix_prob, g)

    def batch(self, size: int, mix_prob: float | None = None) -> list[MixedSample]:
        return [self.draw(mix_prob) for _ in range(size)]


def _videos(samples) -> np.ndarray:
    return np.stack([s.video for s in samples])


def _captions(samples) -> list:
    return [s.target.caption for s in samples]


def student_conditions(student: StudentEncoder, samples: list[MixedSample]) -> tuple[Tensor, Tensor]:
    """Student video tokens ``[B, S*t, D]`` and generator-side text ``[B, L, d_text]``."""
    feat, _ = student.encode(_videos(samples), _captions(samples))
    b = len(samples)
    text = student.text.encode_batch(_captions(samples)).embeddings
    return feat.reshape(b, -1, feat.shape[-1]), text


# -- bookkeeping -------------------------------------------------------------------

class _Monitor:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.initial: float | None = None
        self.streak = 0

    def check(self, step: int, loss: float) -> None:
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.config.divergence_factor * self.initial:
            self.streak += 1
            if self.streak >= self.config.divergence_patience:
                raise DivergenceError(
                    f"loss {loss:.4g} above {self.config.divergence_factor}x the initial {self.initial:.4g} "
                    f"for {self.streak} consecutive steps (step {step}); try a lower lr")
        else:
            self.streak = 0


def _window_means(losses: list, width: int = 100) -> list:
    return [float(np.mean(losses[i:i + width])) for i in range(0, len(losses), width)]


def _optimizer(config: TrainConfig) -> OptimizerState:
    return OptimizerState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                          weight_decay=config.weight_decay, clip_norm=config.clip_norm)


def _run_manifest(config: TrainConfig, world: World, losses: list, counts: dict, extra: dict) -> dict:
    out = {"kind": "train", "config": asdict(config), "seed": config.seed, "build_id": build_id(),
           "world_seed": world.seed, "world_config": asdict(world.config),
           "losses_per_100": _window_means(losses), "final_loss": losses[-1] if losses else None,
           "initial_loss": losses[0] if losses else None, "parameters": counts}
    out.update(extra)
    return out


def _param_counts(store) -> dict:
    total = store.count()
    train = store.count(trainable_only=True)
    return {"total": total, "trainable": train, "trainable_fraction": train / total if total else 0.0}


def _write_curve(directory: Path, rows: list) -> None:
    (directory / "loss.csv").write_text(csv_text(["step", "loss", "lr", "grad_norm"], rows))


def new_student(world: World, config: TrainConfig) -> StudentEncoder:
    enc = encoder_config_for(world.config, config.n_sup)
    return StudentEncoder(enc, Vocabulary.for_classes(world.config.n_classes), rngmod.child_seed(config.seed, "student"))


def new_generator(world: World, student: StudentEncoder, config: TrainConfig) -> GeneratorNet:
    gcfg = generator_config_for(world.config, student.config)
    return GeneratorNet(gcfg, student.config, rngmod.child_seed(config.seed, "generator"))


def _model_meta(world: World, enc: EncoderConfig) -> dict:
    return {"world_config": asdict(world.config), "world_seed": world.seed, "encoder_config": asdict(enc)}


# -- stage 1 ------------------------------------------------------------------------

def train_stage1(config: TrainConfig, world: World, scenes: list[Scene] | None = None,
                 out_dir=None, student: StudentEncoder | None = None, extra_manifest: dict | None = None) -> TrainResult:
    """Distil the clean-scene teacher into the text-conditioned student on auto-mixed inputs."""
    if config.stage != 1:
        raise UsageError("train_stage1 needs a stage-1 config")
    scenes = scenes if scenes is not None else generate_scenes(world, 240, "train")
    student = student or new_student(world, config)
    student.set_stage(1)
    teacher = TeacherEncoder(student.config, world.seed)
    sampler = MixSampler(scenes, config, rngmod.stream(config.seed, "train.stage1"))
    opt, monitor = _optimizer(config), _Monitor(config)
    params = {k: t.data for k, t in student.store.trainable().items()}
    losses, rows = [], []
    t0 = time.perf_counter()
    for step in range(config.total_steps):
        batch = sampler.batch(config.batch_size)
        student.store.zero_grad()
        feat, _ = student.encode(_videos(batch), _captions(batch))
        loss = distill_loss(feat, teacher.encode_batch([s.target for s in batch]))
        loss.backward()
        lr_t = lr_schedule(step, config.lr, config.warmup_steps)
        adamw_step(params, {k: t.grad for k, t in student.store.trainable().items()}, opt, lr_t)
        value = loss.item()
        monitor.check(step, value)
        losses.append(value)
        rows.append([step, value, lr_t, opt.last_grad_norm])
        if step % 100 == 0:
            log.info("stage 1 step %d loss %.5f (%.1fs)", step, value, time.perf_counter() - t0)
    manifest = _run_manifest(config, world, losses, _param_counts(student.store), extra_manifest or {})
    result = TrainResult(losses, manifest, student=student)
    if out_dir is not None:
        out = ensure_writable(out_dir)
        save_checkpoint(out, student.store.state(), student.store.trainable_flags(), 1,
                        {"role": "student", **_model_meta(world, student.config)})
        _write_curve(out, rows)
        manifest["checkpoint_digest"] = checkpoint_digest_params(out)
        write_json(out / "run_manifest.json", manifest)
        result.checkpoint = out
    return result


def heldout_loss(student: StudentEncoder, world: World, scenes: list[Scene], n: int = 64, seed: int = 0,
                 batch_size: int = 8) -> float:
    """Distillation loss on always-mixed samples drawn from ``scenes`` with a fixed stream."""
    teacher = TeacherEncoder(student.config, world.seed)
    sampler = MixSampler(scenes, TrainConfig(seed=seed), rngmod.stream(seed, "heldout"))
    samples = sampler.batch(n, mix_prob=1.0)
    total = 0.0
    for i in range(0, n, batch_size):
        chunk = samples[i:i + batch_size]
        feat, _ = student.encode(_videos(chunk), _captions(chunk))
        total += distill_loss(feat, teacher.encode_batch([s.target for s in chunk])).item() * len(chunk)
    return total / n


# -- stage 2 ------------------------------------------------------------------------

def _feature_pool(student: StudentEncoder, sampler: MixSampler, size: int, batch: int):
    vids, texts, audio = [], [], []
    for _ in range(0, size, batch):
        samples = sampler.batch(batch)
        v, t = student_conditions(student, samples)
        vids.append(v.data)
        texts.append(t.data)
        audio.append(np.stack([s.target_audio for s in samples]))
    return np.concatenate(vids)[:size], np.concatenate(texts)[:size], np.concatenate(audio)[:size]


def train_stage2(config: TrainConfig, world: World, student, scenes: list[Scene] | None = None,
                 out_dir=None, student_checkpoint=None, extra_manifest: dict | None = None) -> TrainResult:
    """CFM training of the generator's adaLN/W_v/null parameters with the student frozen.

    ``student`` is a :class:`StudentEncoder` or a stage-1 checkpoint directory.
    """
    if config.stage != 2:
        raise UsageError("train_stage2 needs a stage-2 config")
    if isinstance(student, (str, Path)):
        student_checkpoint = Path(student)
        student = load_student(student_checkpoint)
    if student is None:
        raise UsageError("stage 2 requires a trained stage-1 student")
    scenes = scenes if scenes is not None else generate_scenes(world, 240, "train")
    student.set_stage(2)
    generator = new_generator(world, student, config)
    gen = rngmod.stream(config.seed, "train.stage2")
    sampler = MixSampler(scenes, config, gen)
    # a pool larger than the number of draws only costs encoder passes
    pool_size = min(config.feature_pool, max(config.total_steps, 1) * config.batch_size)
    pool = _feature_pool(student, sampler, pool_size, config.batch_size) if config.feature_pool else None
    opt, monitor = _optimizer(config), _Monitor(config)
    params = {k: t.data for k, t in generator.store.trainable().items()}
    ema = EmaState.create(params, config.sigma_rel, config.total_steps)
    losses, rows = [], []
    t0 = time.perf_counter()
    for step in range(config.total_steps):
        if pool is not None:
            idx = gen.integers(len(pool[0]), size=config.batch_size)
            cond = ConditionSet.create(pool[0][idx], pool[1][idx])
            a1 = pool[2][idx]
        else:
            batch = sampler.batch(config.batch_size)
            cond = ConditionSet.create(*student_conditions(student, batch))
            a1 = np.stack([s.target_audio for s in batch])
        cond = drop_conditions(cond, config.p_joint_drop, config.p_text_drop, gen)
        generator.store.zero_grad()
        loss = cfm_loss(generator, a1, cond, gen)
        loss.backward()
        lr_t = lr_schedule(step, config.lr, config.warmup_steps)
        adamw_step(params, {k: t.grad for k, t in generator.store.trainable().items()}, opt, lr_t)
        ema_update(ema, params)
        value = loss.item()
        monitor.check(step, value)
        losses.append(value)
        rows.append([step, value, lr_t, opt.last_grad_norm])
        if step % 100 == 0:
            log.info("stage 2 step %d loss %.5f (%.1fs)", step, value, time.perf_counter() - t0)
    extra = dict(extra_manifest or {})
    extra["ema_decay"] = ema.decay
    manifest = _run_manifest(config, world, losses, _param_counts(generator.store), extra)
    result = TrainResult(losses, manifest, student=student, generator=generator, ema=ema)
    if out_dir is not None:
        result.checkpoint = save_generator(out_dir, generator, ema, world, student, student_checkpoint, rows, manifest)
    return result


def save_generator(out_dir, generator: GeneratorNet, ema: EmaState | None, world: World, student: StudentEncoder,
                   student_checkpoint, rows: list, manifest: dict) -> Path:
    out = ensure_writable(out_dir)
    meta = {"role": "generator", **_model_meta(world, student.config),
            "generator_config": asdict(generator.config)}
    if student_checkpoint is not None:
        # relative to the generator directory so the pair can be moved together
        meta["student_checkpoint"] = os.path.relpath(Path(student_checkpoint).resolve(), Path(out).resolve())
        meta["student_digest"] = checkpoint_digest_params(student_checkpoint)
        manifest["student_digest"] = meta["student_digest"]
        manifest["student_run_manifest_sha256"] = _maybe_sha(Path(student_checkpoint) / "run_manifest.json")
    save_checkpoint(out, generator.store.state(), generator.store.trainable_flags(), 2, meta)
    if ema is not None:
        shadow = generator.store.state()
        shadow.update({k: v.copy() for k, v in ema.shadow.items()})
        save_checkpoint(out / "ema", shadow, generator.store.trainable_flags(), 2, {**meta, "ema_decay": ema.decay})
    _write_curve(out, rows)
    manifest["checkpoint_digest"] = checkpoint_digest_params(out)
    write_json(out / "run_manifest.json", manifest)
    return out


def _maybe_sha(path: Path) -> str | None:
    return file_sha256(path) if path.exists() else None


def checkpoint_digest_params(directory) -> str:
    """Digest of the parameter files and checkpoint manifest, ignoring run logs."""
    directory = Path(directory)
    h = hashlib.sha256()
    for path in sorted((directory / "params").glob("*.slvt")) + [directory / "manifest.json"]:
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# -- joint ablation -------------------------------------------------------------------

def train_joint(config: TrainConfig, world: World, scenes: list[Scene] | None = None, out_dir=None,
                extra_manifest: dict | None = None) -> TrainResult:
    """Single-stage ablation: distillation and CFM losses summed and optimized together.

    The generator sees the live student features, so CFM gradients also reach the
    student's trainable head.
    """
    scenes = scenes if scenes is not None else generate_scenes(world, 240, "train")
    config = replace(config, stage=2) if config.stage != 2 else config
    student = new_student(world, config)
    student.set_stage(1)
    generator = new_generator(world, student, config)
    teacher = TeacherEncoder(student.config, world.seed)
    gen = rngmod.stream(config.seed, "train.joint")
    sampler = MixSampler(scenes, config, gen)
    opt, monitor = _optimizer(config), _Monitor(config)
    live = {f"student/{k}": t for k, t in student.store.trainable().items()}
    live.update({f"generator/{k}": t for k, t in generator.store.trainable().items()})
    params = {k: t.data for k, t in live.items()}
    ema = EmaState.create({k: t.data for k, t in generator.store.trainable().items()}, config.sigma_rel,
                          config.total_steps)
    losses, rows = [], []
    for step in range(config.total_steps):
        batch = sampler.batch(config.batch_size)
        student.store.zero_grad()
        generator.store.zero_grad()
        feat, _ = student.encode(_videos(batch), _captions(batch))
        distill = distill_loss(feat, teacher.encode_batch([s.target for s in batch]))
        text = student.text.encode_batch(_captions(batch)).embeddings
        cond = drop_conditions(ConditionSet.create(feat.reshape(len(batch), -1, feat.shape[-1]), text),
                               config.p_joint_drop, config.p_text_drop, gen)
        loss = distill + cfm_loss(generator, np.stack([s.target_audio for s in batch]), cond, gen)
        loss.backward()
        lr_t = lr_schedule(step, config.lr, config.warmup_steps)
        adamw_step(params, {k: t.grad for k, t in live.items()}, opt, lr_t)
        ema_update(ema, {k: t.data for k, t in generator.store.trainable().items()})
        value = loss.item()
        monitor.check(step, value)
        losses.append(value)
        rows.append([step, value, lr_t, opt.last_grad_norm])
    extra = {"joint_training": True, "ema_decay": ema.decay, **(extra_manifest or {})}
    manifest = _run_manifest(config, world, losses, _param_counts(generator.store), extra)
    result = TrainResult(losses, manifest, student=student, generator=generator, ema=ema)
    if out_dir is not None:
        out = ensure_writable(out_dir)
        student_dir = out / "student"
        save_checkpoint(student_dir, student.store.state(), student.store.trainable_flags(), 1,
                        {"role": "student", **_model_meta(world, student.config)})
        result.checkpoint = save_generator(out, generator, ema, world, student, student_dir, rows, manifest)
    return result


# -- loading --------------------------------------------------------------------------

def _world_config(meta: dict) -> WorldConfig:
    return WorldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["world_config"].items()})


def load_student(directory) -> StudentEncoder:
    params, meta = load_checkpoint(directory)
    if meta.get("role") != "student":
        raise UsageError(f"{directory} is not a student checkpoint")
    enc = EncoderConfig(**meta["encoder_config"])
    wc = _world_config(meta)
    student = StudentEncoder(enc, Vocabulary.for_classes(wc.n_classes), 0)
    student.store.load_state(params)
    student.set_stage(2)
    return student


def load_generator(directory, use_ema: bool = True) -> tuple[GeneratorNet, StudentEncoder, dict]:
    directory = Path(directory)
    source = directory / "ema" if use_ema and (directory / "ema" / "manifest.json").exists() else directory
    params, meta = load_checkpoint(source)
    if meta.get("role") != "generator":
        raise UsageError(f"{directory} is not a generator checkpoint")
    if "student_checkpoint" not in meta:
        raise UsageError(f"{directory} does not reference a student checkpoint")
    student_dir = Path(meta["student_checkpoint"])
    student = load_student(student_dir if student_dir.is_absolute() else directory / student_dir)
    enc = EncoderConfig(**meta["encoder_config"])
    generator = GeneratorNet(GeneratorConfig(**meta["generator_config"]), enc, 0)
    generator.store.load_state(params)
    generator.set_stage(0)
    return generator, student, meta
