"""Procedural audiovisual toy world, auto-mixing and benchmark pairing.

Each event class owns a spatial texture and a spectral template.  A scene is
a burst-train activity envelope rendered twice: into video frames (texture
scaled by activity) and into an audio latent (template scaled by activity).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import BenchmarkError, ConfigError, WorldError
from .serialize import load_tensor, read_jsonl, save_tensor, write_jsonl

log = logging.getLogger(__name__)

LEFT, RIGHT = "left", "right"


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 12
    n_categories: int = 4
    frames: int = 64
    patch: int = 8
    d_patch: int = 4
    audio_len: int = 64
    d_audio: int = 8
    audio_noise: float = 0.02
    video_noise: float = 0.05
    max_cosine: float = 0.3
    period_range: tuple = (8, 16)
    duty_range: tuple = (0.3, 0.5)
    jitter_range: tuple = (0.5, 1.5)
    retries: int = 20000


@dataclass(frozen=True)
class EventClass:
    id: int
    category: int
    texture: np.ndarray = field(repr=False)
    template: np.ndarray = field(repr=False)
    period: int = 8
    duty: float = 0.4
    jitter: float = 1.0

    @property
    def token(self) -> str:
        return class_token(self.id)


def class_token(class_id: int) -> str:
    return f"class_{class_id:02d}"


@dataclass(frozen=True)
class World:
    config: WorldConfig
    seed: int
    classes: tuple

    def by_category(self) -> dict[int, list[EventClass]]:
        out: dict[int, list[EventClass]] = {}
        for c in self.classes:
            out.setdefault(c.category, []).append(c)
        return out

    def templates(self) -> np.ndarray:
        return np.stack([c.template for c in self.classes])


@dataclass(frozen=True)
class Scene:
    class_id: int
    category: int
    seed: int
    video: np.ndarray = field(repr=False)        # [F, P, P, d_patch]
    envelope: np.ndarray = field(repr=False)     # [F] in [0, 1]
    audio_latent: np.ndarray = field(repr=False)  # [T_a, d_audio]
    caption: tuple = ()
    scene_id: str = ""


@dataclass(frozen=True)
class MixedSample:
    video: np.ndarray = field(repr=False)  # [F, P, W, d_patch]
    lam: float
    target_side: str
    target: Scene
    pair: Scene | None
    pair_id: int = -1
    duplicate: bool = False

    @property
    def target_text(self) -> tuple:
        return self.target.caption

    @property
    def target_audio(self) -> np.ndarray:
        return self.target.audio_latent

    @property
    def target_columns(self) -> slice:
        width = self.video.shape[2]
        n = target_width(self.lam, width) if self.pair is not None else width
        return slice(0, n) if self.target_side == LEFT else slice(width - n, width)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _coherence(x: np.ndarray) -> float:
    g = np.abs(x @ x.T)
    np.fill_diagonal(g, 0.0)
    return float(g.max())


def _draw_separated(gen, count: int, dim: int, max_cos: float, retries: int, what: str) -> list[np.ndarray]:
    """Unit vectors with pairwise |cos| < max_cos.

    Each attempt draws Gaussian directions and, if they are too coherent,
    relaxes them with a few hundred steps of pairwise repulsion.  Dense
    packings (many vectors in few dimensions) need the relaxation; sparse ones
    pass on the first draw.
    """
    for _attempt in range(max(1, retries // 1000)):
        x = gen.normal(size=(count, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        for _ in range(2000):
            if _coherence(x) < max_cos:
                return list(x)
            g = x @ x.T
            np.fill_diagonal(g, 0.0)
            # gradient of sum |g_ij|^6 pushes the worst pairs hardest
            x = x - 0.05 * ((g ** 5) / (np.abs(g).max() ** 5)) @ x
            x /= np.linalg.norm(x, axis=1, keepdims=True)
    raise WorldError(f"could not draw {count} {what} with pairwise |cos| < {max_cos}")


def build_world(n_classes: int = 12, n_categories: int = 4, seed: int = 0, config: WorldConfig | None = None) -> World:
    config = replace(config or WorldConfig(), n_classes=n_classes, n_categories=n_categories)
    if n_classes < 2 or n_categories < 2:
        raise ConfigError("need at least 2 classes and 2 categories")
    if n_classes % n_categories:
        raise ConfigError(f"{n_classes} classes do not split evenly into {n_categories} categories")
    gen = rngmod.stream(seed, "world")
    p, d = config.patch, config.d_patch
    textures = _draw_separated(gen, n_classes, p * p * d, config.max_cosine, config.retries, "textures")
    templates = _draw_separated(gen, n_classes, config.d_audio, config.max_cosine, config.retries, "spectral templates")
    per = n_classes // n_categories
    classes = []
    for k in range(n_classes):
        period = int(gen.integers(config.period_range[0], config.period_range[1] + 1))
        duty = float(gen.uniform(*config.duty_range))
        jitter = float(gen.uniform(*config.jitter_range))
        # unit RMS per entry so texture energy is comparable to d_patch per patch
        texture = textures[k].reshape(p, p, d) * np.sqrt(p * p * d) * 0.5
        classes.append(EventClass(k, k // per, texture, templates[k], period, duty, jitter))
    return World(config, int(seed), tuple(classes))


def make_envelope(cls: EventClass, frames: int, gen: np.random.Generator) -> np.ndarray:
    env = np.zeros(frames)
    length = max(1, int(round(cls.duty * cls.period)))
    start = float(gen.uniform(-cls.period, 0))
    while start < frames:
        onset = int(round(start + gen.normal(0.0, cls.jitter)))
        amp = float(gen.uniform(0.6, 1.0))
        lo, hi = max(onset, 0), min(onset + length, frames)
        if hi > lo:
            env[lo:hi] = np.maximum(env[lo:hi], amp)
        start += cls.period
    return env


def resample_nearest(x: np.ndarray, length: int) -> np.ndarray:
    src = x.shape[0]
    idx = np.minimum((np.arange(length) * src) // length, src - 1)
    return x[idx]


def make_scene(cls: EventClass, seed: int, config: WorldConfig | None = None, scene_id: str = "") -> Scene:
    config = config or WorldConfig()
    gen = rngmod.stream(seed, "scene")
    env = make_envelope(cls, config.frames, gen)
    env_audio = resample_nearest(env, config.audio_len)
    audio = np.outer(env_audio, cls.template)
    if config.audio_noise > 0:
        audio = audio + gen.normal(0.0, config.audio_noise, size=audio.shape)
    video = env[:, None, None, None] * cls.texture[None]
    if config.video_noise > 0:
        video = video + gen.normal(0.0, config.video_noise, size=video.shape)
    return Scene(cls.id, cls.category, int(seed), video, env, audio, (cls.token,), scene_id)


def sample_mix_ratio(alpha: float, clip_min: float, gen: np.random.Generator, mode: str = "clip") -> float:
    """Draw lambda ~ Beta(alpha, alpha) and enforce ``lambda >= clip_min``.

    ``mode="clip"`` takes ``max(lambda, clip_min)``; ``mode="reject"`` redraws.
    """
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    if not 0 <= clip_min < 1:
        raise ConfigError("clip_min must lie in [0, 1)")
    lam = float(gen.beta(alpha, alpha))
    if mode == "clip":
        return max(lam, clip_min)
    if mode == "reject":
        while lam < clip_min:
            lam = float(gen.beta(alpha, alpha))
        return lam
    raise ConfigError(f"unknown clipping mode {mode!r}")


def target_width(lam: float, width: int) -> int:
    return int(min(width, max(1, round(lam * width))))


def resize_columns(video: np.ndarray, n_cols: int) -> np.ndarray:
    """Nearest-neighbour resampling of the width axis (axis 2)."""
    width = video.shape[2]
    idx = np.minimum(((np.arange(n_cols) + 0.5) * width / n_cols).astype(int), width - 1)
    return video[:, :, idx]


def mix_videos(target: Scene, pair: Scene, lam: float, target_side: str) -> np.ndarray:
    if target.video.shape != pair.video.shape:
        raise ConfigError("scenes must share frame count, patch grid and channels")
    width = target.video.shape[2]
    n = target_width(lam, width)
    left = resize_columns(target.video, n)
    right = resize_columns(pair.video, width - n)
    if target_side == RIGHT:
        left, right = right, left
    elif target_side != LEFT:
        raise ConfigError(f"target_side must be 'left' or 'right', got {target_side!r}")
    return np.concatenate([left, right], axis=2)


def auto_mix(target: Scene, pair: Scene | None, lam: float, target_side: str, mix_prob: float,
             gen: np.random.Generator) -> MixedSample:
    """Horizontally concatenate target and pair with probability ``mix_prob``.

    A mix whose λ rounds to the full width keeps the pair recorded with zero columns.
    """
    if pair is None or gen.random() >= mix_prob:
        return MixedSample(target.video, 1.0, target_side, target, None)
    return MixedSample(mix_videos(target, pair, lam, target_side), float(lam), target_side, target, pair)


def build_benchmark(scenes: list[Scene], mode: str, per_category_quota: int, seed: int) -> list[MixedSample]:
    """Category-balanced pair list; shortfalls are filled by resampling with replacement."""
    if len(scenes) < 2:
        raise BenchmarkError("need at least two scenes")
    if mode not in ("inter", "intra"):
        raise ConfigError(f"mode must be 'inter' or 'intra', got {mode!r}")
    gen = rngmod.stream(seed, "benchmark", mode)
    by_cat: dict[int, list[tuple[int, int]]] = {}
    for i, t in enumerate(scenes):
        for j, p in enumerate(scenes):
            if i == j or t.class_id == p.class_id:
                continue
            ok = t.category != p.category if mode == "inter" else t.category == p.category
            if ok:
                by_cat.setdefault(t.category, []).append((i, j))
    if not by_cat:
        raise BenchmarkError(f"no candidate pairs for mode {mode!r}")
    out: list[MixedSample] = []
    for cat in sorted(by_cat):
        cands = by_cat[cat]
        if len(cands) >= per_category_quota:
            picks = [(k, False) for k in gen.choice(len(cands), size=per_category_quota, replace=False)]
        else:
            picks = [(k, False) for k in gen.permutation(len(cands))]
            extra = gen.choice(len(cands), size=per_category_quota - len(cands), replace=True)
            picks += [(k, True) for k in extra]
            log.info("category %d: %d candidates for quota %d, resampled with replacement",
                     cat, len(cands), per_category_quota)
        for k, dup in picks:
            i, j = cands[int(k)]
            side = LEFT if gen.random() < 0.5 else RIGHT
            video = mix_videos(scenes[i], scenes[j], 0.5, side)
            out.append(MixedSample(video, 0.5, side, scenes[i], scenes[j], len(out), bool(dup)))
    return out


# -- on-disk dataset -----------------------------------------------------------

def generate_scenes(world: World, count: int, split: str, jobs: int = 1) -> list[Scene]:
    """``count`` scenes cycling through the classes, each with its own derived seed."""
    def one(i: int) -> Scene:
        cls = world.classes[i % len(world.classes)]
        seed = rngmod.child_seed(world.seed, "scene", split, i)
        return make_scene(cls, seed, world.config, scene_id=f"{split}-{i:05d}")

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(count)))
    return [one(i) for i in range(count)]


def write_scenes(directory: Path, scenes: list[Scene]) -> list[dict]:
    directory = Path(directory)
    (directory / "scenes").mkdir(parents=True, exist_ok=True)
    records = []
    for s in scenes:
        files = {}
        for key in ("video", "envelope", "audio_latent"):
            rel = f"scenes/{s.scene_id}.{key}.slvt"
            save_tensor(directory / rel, getattr(s, key))
            files[key] = rel
        records.append({"scene_id": s.scene_id, "class_id": s.class_id, "category": s.category,
                        "seed": s.seed, "caption": list(s.caption), "files": files})
    return records


def read_scenes(directory: Path, records: list[dict]) -> list[Scene]:
    directory = Path(directory)
    return [Scene(r["class_id"], r["category"], r["seed"],
                  load_tensor(directory / r["files"]["video"]),
                  load_tensor(directory / r["files"]["envelope"]),
                  load_tensor(directory / r["files"]["audio_latent"]),
                  tuple(r["caption"]), r["scene_id"]) for r in records]


def benchmark_records(pairs: list[MixedSample]) -> list[dict]:
    return [{"pair_id": p.pair_id, "target": p.target.scene_id, "pair": p.pair.scene_id,
             "target_side": p.target_side, "lambda": p.lam, "duplicate": p.duplicate,
             "target_class": p.target.class_id, "pair_class": p.pair.class_id} for p in pairs]


def load_benchmark(records: list[dict], scenes: dict[str, Scene]) -> list[MixedSample]:
    out = []
    for r in records:
        t, p = scenes[r["target"]], scenes[r["pair"]]
        video = mix_videos(t, p, r["lambda"], r["target_side"])
        out.append(MixedSample(video, r["lambda"], r["target_side"], t, p, r["pair_id"], r["duplicate"]))
    return out


def load_dataset(directory) -> tuple[World, dict[str, list[Scene]], dict[str, list[MixedSample]], dict]:
    """Inverse of the ``gen-world`` command: world, scenes per split, benchmarks per mode."""
    import json

    directory = Path(directory)
    meta = json.loads((directory / "manifest.json").read_text())
    cfg = meta["world_config"]
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
    world = build_world(cfg["n_classes"], cfg["n_categories"], meta["seed"], WorldConfig(**cfg))
    records = read_jsonl(directory / "scenes.jsonl")
    splits: dict[str, list[Scene]] = {}
    for rec, scene in zip(records, read_scenes(directory, records)):
        splits.setdefault(rec["scene_id"].split("-")[0], []).append(scene)
    by_id = {s.scene_id: s for ss in splits.values() for s in ss}
    benches = {}
    for mode in ("inter", "intra"):
        path = directory / f"benchmark_{mode}.jsonl"
        benches[mode] = load_benchmark(read_jsonl(path), by_id) if path.exists() else []
    return world, splits, benches, meta


__all__ = [
    "WorldConfig", "EventClass", "World", "Scene", "MixedSample", "build_world", "make_scene",
    "sample_mix_ratio", "auto_mix", "build_benchmark", "mix_videos", "resize_columns",
    "generate_scenes", "write_scenes", "read_scenes", "load_dataset", "benchmark_records",
    "write_jsonl", "class_token", "LEFT", "RIGHT",
]
