"""Teacher and text-conditioned student video encoders.

The student runs a frozen divided space-time stack over tubelet tokens, then a
trainable text cross-attention block and a trainable spatial attention pool.
The teacher is a closed-form oracle over the clean target scene.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ShapeError, UsageError
from .nn import (
    ParamStore,
    add_attention,
    add_linear,
    add_mlp,
    apply_attention,
    apply_linear,
    apply_mlp,
    orthogonal_init,
    self_attention_block,
)
from .tensor import Tensor, layer_norm, merge_heads, softmax, split_heads
from .text import TextEncoder, TextSequence, Vocabulary, prepend_sup
from .world import Scene

STAGE1_PREFIXES = ("text.proj.", "sup", "xattn.", "pool.")


@dataclass(frozen=True)
class EncoderConfig:
    frames: int = 64
    patch: int = 8
    width: int = 8
    d_patch: int = 4
    window: int = 16
    hop: int = 8
    t_per_segment: int = 4
    dim: int = 32
    heads: int = 4
    n_spatial: int = 2
    n_temporal: int = 2
    mlp_ratio: int = 2
    d_text: int = 32
    n_sup: int = 5
    n_classes: int = 12
    teacher_class_dim: int = 16
    teacher_stat_gain: float = 1.5

    @property
    def tubelet(self) -> int:
        return self.window // self.t_per_segment

    @property
    def segments(self) -> int:
        return n_segments(self.frames, self.window, self.hop)

    @property
    def tokens(self) -> int:
        return self.patch * self.width


def n_segments(frames: int, window: int, hop: int) -> int:
    if frames < window:
        raise ShapeError(f"{frames} frames is shorter than the window of {window}")
    return (frames - window) // hop + 1


def segment(video: np.ndarray, window: int, hop: int) -> np.ndarray:
    """``[F, ...] -> [S, window, ...]`` overlapping windows (copied by value)."""
    s = n_segments(video.shape[0], window, hop)
    return np.stack([video[i * hop:i * hop + window] for i in range(s)])


def slice_bounds(config: EncoderConfig) -> np.ndarray:
    """Frame range ``[start, stop)`` covered by each (segment, timestep) token."""
    tub = config.tubelet
    out = np.zeros((config.segments, config.t_per_segment, 2), dtype=int)
    for s in range(config.segments):
        for j in range(config.t_per_segment):
            start = s * config.hop + j * tub
            out[s, j] = (start, start + tub)
    return out


class TeacherEncoder:
    """Parameter-free oracle: class embedding plus per-slice activity statistics."""

    def __init__(self, config: EncoderConfig, seed: int):
        self.config = config
        gen = rngmod.stream(seed, "teacher")
        d_in = config.teacher_class_dim + 2
        self.class_table = gen.normal(0.0, 1.0, size=(config.n_classes, config.teacher_class_dim))
        self.class_table /= np.sqrt(config.teacher_class_dim)
        # orthonormal rows, rescaled so features have roughly unit RMS per entry
        self.projection = orthogonal_init(gen, d_in, config.dim) * np.sqrt(config.dim / 2.0)
        self.bounds = slice_bounds(config)

    def stats(self, envelope: np.ndarray) -> np.ndarray:
        out = np.zeros(self.bounds.shape[:2] + (2,))
        for s in range(self.bounds.shape[0]):
            for j in range(self.bounds.shape[1]):
                lo, hi = self.bounds[s, j]
                chunk = envelope[lo:hi]
                out[s, j] = chunk.mean(), chunk.max()
        return out

    def encode_parts(self, class_id: int, envelope: np.ndarray) -> np.ndarray:
        stats = self.stats(envelope) * self.config.teacher_stat_gain
        emb = np.broadcast_to(self.class_table[class_id], stats.shape[:2] + (self.class_table.shape[1],))
        return np.concatenate([emb, stats], axis=-1) @ self.projection

    def encode(self, scene: Scene) -> np.ndarray:
        if len(scene.envelope) != self.config.frames:
            raise ShapeError("scene frame count does not match the encoder config")
        return self.encode_parts(scene.class_id, scene.envelope)

    def encode_batch(self, scenes) -> np.ndarray:
        return np.stack([self.encode(s) for s in scenes])


@dataclass
class AttentionRecord:
    """Cross-attention ``[heads, video tokens, text tokens]`` and pooling ``[heads, S*t, N]``."""

    cross: np.ndarray
    pool: np.ndarray
    grid: tuple = field(default=(8, 8))
    eos_index: int = -1


class StudentEncoder:
    """Text-conditioned video encoder with a frozen space-time backbone."""

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, seed: int):
        if config.dim % config.heads:
            raise ConfigError("dim must be divisible by heads")
        self.config = config
        self.store = ParamStore()
        self.text = TextEncoder(self.store, vocab, config.d_text, seed)
        gen = rngmod.stream(seed, "student")
        c, d = config, config.dim
        add_linear(self.store, gen, "st.embed", c.tubelet * c.d_patch, d)
        self.store.add("st.pos_spatial", gen.normal(0.0, 1.0, size=(c.tokens, d)))
        self.store.add("st.pos_temporal", gen.normal(0.0, 0.5, size=(c.t_per_segment, 1, d)))
        for i in range(c.n_spatial):
            add_attention(self.store, gen, f"st.spatial{i}.attn", d, d, d)
            add_mlp(self.store, gen, f"st.spatial{i}.mlp", d, d * c.mlp_ratio, gain=0.5)
        for i in range(c.n_temporal):
            add_attention(self.store, gen, f"st.temporal{i}.attn", d, d, d)
            add_mlp(self.store, gen, f"st.temporal{i}.mlp", d, d * c.mlp_ratio, gain=0.5)
        self.store.add("sup", gen.normal(0.0, 1.0, size=(c.n_sup, c.d_text)))
        add_attention(self.store, gen, "xattn.attn", d, c.d_text, d, zero_out=True)
        add_mlp(self.store, gen, "xattn.mlp", d, d * c.mlp_ratio, zero_out=True)
        self.store.add("pool.query", gen.normal(0.0, 1.0, size=(1, d)))
        add_linear(self.store, gen, "pool.k", d, d)
        add_linear(self.store, gen, "pool.v", d, d)
        add_linear(self.store, gen, "pool.o", d, d)
        self.set_stage(1)

    # -- trainability ---------------------------------------------------------
    def set_stage(self, stage: int) -> None:
        """Stage 1 trains the text projection, [SUP] bank, cross-attention and pool."""
        if stage == 1:
            self.store.set_trainable(lambda n: n.startswith(STAGE1_PREFIXES))
        else:
            self.store.set_trainable(lambda n: False)

    # -- frozen backbone -------------------------------------------------------
    def tubelets(self, videos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unique tubelet tokens ``[B, U, N, tubelet*d_patch]`` and the ``[S, t]`` index into U.

        Overlapping segments share tubelets; the spatial blocks see each one once.
        """
        c = self.config
        b, f, p, w, dp = videos.shape
        if (f, p, w, dp) != (c.frames, c.patch, c.width, c.d_patch):
            raise ShapeError(f"video shape {videos.shape[1:]} does not match encoder config")
        starts = slice_bounds(c)[..., 0]
        unique, inverse = np.unique(starts, return_inverse=True)
        idx = unique[:, None] + np.arange(c.tubelet)[None, :]
        tub = videos[:, idx].reshape(b, len(unique), c.tubelet, p * w, dp)
        tub = tub.transpose(0, 1, 3, 2, 4).reshape(b, len(unique), p * w, c.tubelet * dp)
        return tub, inverse.reshape(starts.shape)

    def backbone(self, videos: np.ndarray) -> Tensor:
        """Hidden video embedding ``h_v``: ``[B, S, t, N, D]``."""
        c, s = self.config, self.store
        tok, inverse = self.tubelets(np.asarray(videos, dtype=np.float64))
        b, u = tok.shape[:2]
        x = apply_linear(s, "st.embed", Tensor(tok)) + s["st.pos_spatial"]
        x = x.reshape(b * u, c.tokens, c.dim)
        for i in range(c.n_spatial):
            x = self_attention_block(s, f"st.spatial{i}", x, c.heads, act="relu")
        x = x.reshape(b, u, c.tokens, c.dim).take(inverse.ravel(), axis=1)
        x = x.reshape(b, c.segments, c.t_per_segment, c.tokens, c.dim) + s["st.pos_temporal"]
        x = x.transpose(0, 1, 3, 2, 4).reshape(b * c.segments * c.tokens, c.t_per_segment, c.dim)
        for i in range(c.n_temporal):
            x = self_attention_block(s, f"st.temporal{i}", x, c.heads, act="relu")
        return x.reshape(b, c.segments, c.tokens, c.t_per_segment, c.dim).transpose(0, 1, 3, 2, 4)

    # -- trainable head --------------------------------------------------------
    def condition_text(self, captions) -> TextSequence:
        seq = self.text.encode_batch(captions)
        return prepend_sup(seq, self.store["sup"])

    def head(self, hv: Tensor, text: TextSequence, record: bool = False):
        c, s = self.config, self.store
        if not text.has_sup:
            raise UsageError("text must pass through prepend_sup before the cross-attention block")
        if text.ids[-1] != self.text.vocab.eos_id:
            raise UsageError("text sequence lacks a terminating [eos]")
        b, n_seg, t, n, d = hv.shape
        q_in = hv.reshape(b, n_seg * t * n, d)
        cross, cross_w = apply_attention(s, "xattn.attn", layer_norm(q_in), text.embeddings, c.heads)
        hvt = q_in + cross
        hvt = hvt + apply_mlp(s, "xattn.mlp", layer_norm(hvt))
        feat, pool_w = self.pool(hvt.reshape(b, n_seg * t, n, d))
        feat = feat.reshape(b, n_seg, t, d)
        if not record:
            return feat, None
        records = [AttentionRecord(cross_w.data[i], pool_w.data[i].transpose(1, 0, 2), (c.patch, c.width), text.eos_index)
                   for i in range(b)]
        return feat, records

    def pool(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Learned-query attention over the spatial axis: ``[..., N, D] -> [..., D]``."""
        s, heads = self.store, self.config.heads
        h = layer_norm(x)
        k = split_heads(apply_linear(s, "pool.k", h), heads)
        v = split_heads(apply_linear(s, "pool.v", h), heads)
        q = split_heads(s["pool.query"], heads)  # [heads, 1, dh]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(k.shape[-1]))
        w = softmax(scores, axis=-1)  # [..., heads, 1, N]
        out = merge_heads(w @ v)  # [..., 1, D]
        out = apply_linear(s, "pool.o", out)
        *lead, _, dim = out.shape
        return out.reshape(*lead, dim), w.reshape(*w.shape[:-2], w.shape[-1])

    def encode(self, videos: np.ndarray, captions, record: bool = False):
        """Student feature ``[B, S, t, D]`` for a batch of videos and their target captions."""
        hv = self.backbone(videos)
        return self.head(hv, self.condition_text(captions), record=record)


def distill_loss(student: Tensor, teacher) -> Tensor:
    """Mean squared difference over every element."""
    teacher = teacher if isinstance(teacher, Tensor) else Tensor(teacher)
    if student.shape != teacher.shape:
        raise ShapeError(f"student {student.shape} and teacher {teacher.shape} differ")
    diff = student - teacher
    return (diff * diff).mean()


def attention_map(record: AttentionRecord, eos_index: int | None = None) -> np.ndarray:
    """Head-averaged [eos] cross-attention times head-averaged pooling, scaled to [0, 1].

    Returns a ``[P, W]`` heat map averaged over segments and timesteps.
    """
    eos = record.eos_index if eos_index is None else eos_index
    if not -record.cross.shape[-1] <= eos < record.cross.shape[-1]:
        raise UsageError(f"eos index {eos} outside the text axis")
    cross = record.cross[..., eos].mean(axis=0)  # [S*t*N]
    pool = record.pool.mean(axis=0)  # [S*t, N]
    heat = (cross.reshape(pool.shape) * pool).mean(axis=0)
    top = heat.max()
    heat = heat / top if top > 0 else heat
    return heat.reshape(record.grid)


def write_pgm(path, heat: np.ndarray, scale: int = 16) -> None:
    """Binary P5 graymap, each cell upscaled to ``scale x scale`` pixels."""
    img = np.clip(np.round(np.asarray(heat) * 255), 0, 255).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
