"""Inference pipeline and benchmark scoring."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import jsonschema
import numpy as np

from . import rng as rngmod
from .errors import BenchmarkError, InputError, NumericError, SelvaError
from .generator import ConditionSet, GeneratorNet, SamplerConfig, sample
from .metrics import (
    KL_DIRECTION,
    ToyEmbedder,
    desync_analog,
    frechet_distance,
    inception_score,
    kernel_distance,
    kl_to_reference,
    selection_accuracy,
    similarity_scores,
)
from .trainer import load_generator
from .video import AttentionRecord, StudentEncoder
from .world import MixedSample

CHUNK = 32


class Generator(Protocol):
    def generate(self, pairs: Sequence[MixedSample], sampler: SamplerConfig, seeds: Sequence[int]) -> np.ndarray:
        ...


def noise_for(seed: int, shape: tuple) -> np.ndarray:
    return rngmod.stream(seed, "noise").standard_normal(shape)


class SelectivePipeline:
    """Student encoder plus generator: mixed video and target caption in, target latent out."""

    def __init__(self, student: StudentEncoder, generator: GeneratorNet):
        self.student = student
        self.generator = generator
        student.set_stage(2)
        generator.set_stage(0)

    @classmethod
    def from_checkpoint(cls, directory, use_ema: bool = True) -> "SelectivePipeline":
        generator, student, _ = load_generator(directory, use_ema=use_ema)
        return cls(student, generator)

    @property
    def latent_shape(self) -> tuple:
        c = self.generator.config
        return (c.audio_len, c.d_audio)

    def conditions(self, videos: np.ndarray, captions: Sequence) -> ConditionSet:
        feats, texts = [], []
        for i in range(0, len(videos), 8):
            feat, _ = self.student.encode(videos[i:i + 8], captions[i:i + 8])
            feats.append(feat.data.reshape(feat.shape[0], -1, feat.shape[-1]))
            texts.append(self.student.text.encode_batch(captions[i:i + 8]).embeddings.data)
        return ConditionSet.create(np.concatenate(feats), np.concatenate(texts))

    def generate_videos(self, videos: np.ndarray, captions: Sequence, sampler: SamplerConfig,
                        seeds: Sequence[int]) -> np.ndarray:
        """One latent per input; each row's starting noise comes from its own seed."""
        videos = np.asarray(videos, dtype=np.float64)
        out = []
        for i in range(0, len(videos), CHUNK):
            cond = self.conditions(videos[i:i + CHUNK], list(captions[i:i + CHUNK]))
            a0 = np.stack([noise_for(s, self.latent_shape) for s in seeds[i:i + CHUNK]])
            out.append(sample(self.generator, cond, sampler, None, a0=a0))
        return np.concatenate(out)

    def generate(self, pairs: Sequence[MixedSample], sampler: SamplerConfig, seeds: Sequence[int]) -> np.ndarray:
        return self.generate_videos(np.stack([p.video for p in pairs]), [p.target.caption for p in pairs],
                                    sampler, seeds)

    def attention(self, video: np.ndarray, caption) -> AttentionRecord:
        _, records = self.student.encode(np.asarray(video)[None], [caption], record=True)
        return records[0]


class GroundTruthGenerator:
    """Oracle: returns each pair's clean target latent."""

    def generate(self, pairs, sampler=None, seeds=None) -> np.ndarray:
        return np.stack([p.target_audio for p in pairs])


class ShuffledGroundTruth:
    """Permutation null: pair ``i`` receives the target latent of pair ``perm[i]``."""

    def __init__(self, permutation):
        self.permutation = np.asarray(permutation)

    def generate(self, pairs, sampler=None, seeds=None) -> np.ndarray:
        truth = np.stack([p.target_audio for p in pairs])
        return truth[self.permutation]


@dataclass
class MetricReport:
    subset: str
    n_pairs: int
    repeats: int
    fad: float
    kad: float
    is_: float
    kl: float
    text_sim: float
    video_sim: float
    desync: float
    desync_median: float
    desync_flagged: int
    selection_accuracy: float
    kl_direction: str = KL_DIRECTION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["is"] = d.pop("is_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["is_"] = d.pop("is")
        return cls(**d)


_NUM = {"type": "number"}
SUBSET_SCHEMA = {
    "type": "object",
    "required": ["subset", "n_pairs", "repeats", "fad", "kad", "is", "kl", "text_sim", "video_sim", "desync",
                 "desync_median", "desync_flagged", "selection_accuracy", "kl_direction"],
    "properties": {
        "subset": {"enum": ["inter", "intra"]},
        "n_pairs": {"type": "integer", "minimum": 1},
        "repeats": {"type": "integer", "minimum": 1},
        "fad": {"type": "number", "minimum": 0},
        "kad": _NUM,
        "is": {"type": "number", "minimum": 1},
        "kl": {"type": "number", "minimum": 0},
        "text_sim": {"type": "number", "minimum": -1, "maximum": 1},
        "video_sim": {"type": "number", "minimum": -1, "maximum": 1},
        "desync": {"type": "number", "minimum": 0},
        "desync_median": {"type": "number", "minimum": 0},
        "desync_flagged": {"type": "integer", "minimum": 0},
        "selection_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "kl_direction": {"type": "string"},
    },
    "additionalProperties": False,
}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["kind", "seed", "sampler", "subsets", "build_id"],
    "properties": {
        "kind": {"const": "eval"},
        "seed": {"type": "integer"},
        "build_id": {"type": "string"},
        "sampler": {"type": "object"},
        "oracle": {"type": "boolean"},
        "subsets": {"type": "object", "additionalProperties": SUBSET_SCHEMA},
        "sweep": {"type": "array"},
    },
}


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def pair_seed(seed: int, pair_id: int, repeat: int) -> int:
    return rngmod.child_seed(seed, "sample.pair", pair_id, repeat)


def score_latents(latents: np.ndarray, pairs: Sequence[MixedSample], embedder: ToyEmbedder) -> dict:
    """Every metric for one set of generated latents aligned with ``pairs``."""
    truth = np.stack([p.target_audio for p in pairs])
    text_sims, video_sims, offsets, selections, flagged = [], [], [], [], 0
    for p, gen in zip(pairs, latents):
        try:
            if not np.all(np.isfinite(gen)):
                raise NumericError("non-finite generated latent")
            ts, vs = similarity_scores(gen, p.target.class_id, p.target.envelope, embedder)
            off, flag = desync_analog(gen, p.target.envelope, embedder.templates[p.target.class_id])
            sel = selection_accuracy(gen, p.target.class_id, p.pair.class_id, embedder.templates)
        except SelvaError as exc:
            raise type(exc)(f"pair {p.pair_id}: {exc}") from exc
        text_sims.append(ts)
        video_sims.append(vs)
        offsets.append(off)
        selections.append(sel)
        flagged += int(flag)
    emb_ref, emb_gen = embedder.embed(truth), embedder.embed(latents)
    gen_probs, ref_probs = embedder.pseudo_probs(latents), embedder.pseudo_probs(truth)
    return {
        "fad": frechet_distance(emb_ref, emb_gen),
        "kad": kernel_distance(emb_ref, emb_gen),
        "is": inception_score(gen_probs),
        "kl": kl_to_reference(gen_probs, ref_probs),
        "text_sim": float(np.mean(text_sims)),
        "video_sim": float(np.mean(video_sims)),
        "desync": float(np.mean(offsets)),
        "desync_median": float(np.median(offsets)),
        "desync_flagged": flagged,
        "selection_accuracy": float(np.mean(selections)),
    }


def run_benchmark(generator: Generator, pairs: Sequence[MixedSample], sampler: SamplerConfig,
                  embedder: ToyEmbedder, subset: str, seed: int = 0, repeats: int = 1) -> MetricReport:
    """Generate one latent per pair (per repeat) with per-pair seeds and score the set.

    The FAD/KAD reference set is the ground-truth target latents of ``pairs``.
    With ``repeats > 1`` every metric is averaged over the repeats.
    """
    if not pairs:
        raise BenchmarkError(f"benchmark subset {subset!r} is empty")
    if repeats < 1:
        raise InputError("repeats must be >= 1")
    pairs = sorted(pairs, key=lambda p: p.pair_id)
    runs = []
    for r in range(repeats):
        seeds = [pair_seed(seed, p.pair_id, r) for p in pairs]
        latents = np.asarray(generator.generate(pairs, sampler, seeds), dtype=np.float64)
        runs.append(score_latents(latents, pairs, embedder))
    merged = {k: float(np.mean([run[k] for run in runs])) for k in runs[0]}
    merged["desync_flagged"] = int(sum(run["desync_flagged"] for run in runs))
    return MetricReport(subset=subset, n_pairs=len(pairs), repeats=repeats, fad=merged["fad"], kad=merged["kad"],
                        is_=merged["is"], kl=merged["kl"], text_sim=merged["text_sim"],
                        video_sim=merged["video_sim"], desync=merged["desync"],
                        desync_median=merged["desync_median"], desync_flagged=merged["desync_flagged"],
                        selection_accuracy=merged["selection_accuracy"])


def format_table(reports: Sequence[MetricReport]) -> str:
    cols = ["subset", "fad", "kad", "is", "kl", "text_sim", "video_sim", "desync", "desync_median",
            "selection_accuracy"]
    lines = ["  ".join(f"{c:>18}" for c in cols)]
    for r in reports:
        d = r.to_dict()
        lines.append("  ".join(f"{d[c]:>18}" if isinstance(d[c], str) else f"{d[c]:>18.4f}" for c in cols))
    return "\n".join(lines)
