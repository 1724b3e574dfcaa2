"""Flow-matching audio generator with adaLN video conditioning.

Multimodal blocks attend jointly over text and audio tokens with separate
per-stream projections; single-modal blocks see audio only.  Every block
modulates its normalized input with ``gamma(c) * LN(h) + beta(c)``.  Audio
blocks use a frame-aligned condition built from the video feature, text blocks
a global one.  In stage 2 only the video projection, the adaLN layers and the
null embeddings train.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DomainError, ShapeError
from .nn import ParamStore, add_attention, add_linear, add_mlp, apply_linear, apply_mlp, orthogonal_init, sinusoidal
from .tensor import Tensor, concat, layer_norm, scaled_dot_attention
from .video import EncoderConfig, slice_bounds

ADALN_TAGS = (".gamma.", ".beta.")


@dataclass(frozen=True)
class GeneratorConfig:
    audio_len: int = 64
    d_audio: int = 8
    dim: int = 32
    heads: int = 4
    n_mm: int = 2
    n_sm: int = 2
    mlp_ratio: int = 2
    d_video: int = 32
    d_text: int = 32
    frames: int = 64
    pos_scale: float = 0.2
    adaln_gain: float = 0.1
    time_scale: float = 1000.0


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    gamma: float = 4.5
    guidance: str = "joint"      # or "three": separate text-only-null branch
    text_gamma: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler steps must be >= 1")
        if self.guidance not in ("joint", "three"):
            raise ConfigError(f"unknown guidance mode {self.guidance!r}")


@dataclass(frozen=True)
class ConditionSet:
    """Video tokens ``[B, N, D]`` and text embeddings ``[B, L, d_text]``.

    The masks mark batch rows whose video/text are replaced by the generator's
    learned null embeddings at forward time.
    """

    video: Tensor
    text: Tensor
    video_null: np.ndarray
    text_null: np.ndarray

    @classmethod
    def create(cls, video, text) -> "ConditionSet":
        video = video if isinstance(video, Tensor) else Tensor(video)
        text = text if isinstance(text, Tensor) else Tensor(text)
        if video.ndim != 3 or text.ndim != 3 or video.shape[0] != text.shape[0]:
            raise ShapeError(f"expected [B, N, D] video and [B, L, d] text, got {video.shape} and {text.shape}")
        b = video.shape[0]
        return cls(video, text, np.zeros(b, dtype=bool), np.zeros(b, dtype=bool))

    @property
    def batch(self) -> int:
        return self.video.shape[0]

    def nulled(self, video: bool = True, text: bool = True) -> "ConditionSet":
        vn = np.ones(self.batch, bool) if video else self.video_null
        tn = np.ones(self.batch, bool) if text else self.text_null
        return replace(self, video_null=vn, text_null=tn)


def frame_alignment(enc: EncoderConfig, audio_len: int) -> np.ndarray:
    """``[T_a, S*t]`` averaging matrix: each audio frame takes the video tokens nearest in time.

    Overlapping segments give several tokens the same centre; those are averaged.
    """
    bounds = slice_bounds(enc).reshape(-1, 2)
    centres = bounds.mean(axis=1)
    frame_t = (np.arange(audio_len) + 0.5) * enc.frames / audio_len
    dist = np.abs(frame_t[:, None] - centres[None, :])
    near = np.isclose(dist, dist.min(axis=1, keepdims=True))
    return near / near.sum(axis=1, keepdims=True)


def interpolate(a0, a1, t):
    """``t * a1 + (1 - t) * a0``; ``t`` is a scalar or one value per batch row."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or not np.all(np.isfinite(t_arr)):
        raise DomainError("t must lie in [0, 1]")
    a0_, a1_ = np.asarray(a0, dtype=np.float64), np.asarray(a1, dtype=np.float64)
    if a0_.shape != a1_.shape:
        raise ShapeError(f"endpoint shapes differ: {a0_.shape} vs {a1_.shape}")
    if t_arr.ndim:
        t_arr = t_arr.reshape(t_arr.shape + (1,) * (a0_.ndim - t_arr.ndim))
    if t_arr.ndim == 0:
        if t_arr == 0:
            return a0_.copy()
        if t_arr == 1:
            return a1_.copy()
    return t_arr * a1_ + (1.0 - t_arr) * a0_


def adaln(h: Tensor, c: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """``gamma(c) * LN(h) + beta(c)`` with ``gamma``, ``beta`` linear in ``c``."""
    w = store[f"{prefix}.gamma.w"]
    if c.shape[-1] != w.shape[0] or h.shape[-1] != w.shape[1]:
        raise ShapeError(f"adaLN {prefix}: condition {c.shape} / hidden {h.shape} do not match {w.shape}")
    if c.ndim == 1:
        c = c.reshape(1, -1)
    gamma = apply_linear(store, f"{prefix}.gamma", c)
    beta = apply_linear(store, f"{prefix}.beta", c)
    return gamma * layer_norm(h) + beta


def add_adaln(store: ParamStore, gen, prefix: str, d_cond: int, d: int, gain: float) -> None:
    store.add(f"{prefix}.gamma.w", gen.normal(0.0, gain / math.sqrt(d_cond), size=(d_cond, d)))
    store.add(f"{prefix}.gamma.b", np.ones(d))
    store.add(f"{prefix}.beta.w", gen.normal(0.0, gain / math.sqrt(d_cond), size=(d_cond, d)))
    store.add(f"{prefix}.beta.b", np.zeros(d))


def is_stage2_trainable(name: str) -> bool:
    return (name.startswith("gen.video.") or name in ("gen.null_video", "gen.null_text")
            or any(tag in name for tag in ADALN_TAGS))


class GeneratorNet:
    """Velocity network ``v(a_t, t, c)``."""

    def __init__(self, config: GeneratorConfig, enc: EncoderConfig, seed: int):
        if config.dim % config.heads:
            raise ConfigError("dim must be divisible by heads")
        if config.d_audio > config.dim:
            raise ConfigError("d_audio must not exceed dim")
        self.config = c = config
        self.enc = enc
        self.store = s = ParamStore()
        self.align = frame_alignment(enc, c.audio_len)
        gen = rngmod.stream(seed, "generator")
        d = c.dim
        # in-projection with orthonormal rows; the output head reuses its transpose
        s.add("gen.in.w", orthogonal_init(gen, c.d_audio, d))
        add_linear(s, gen, "gen.time", d, d)
        add_linear(s, gen, "gen.text_in", c.d_text, d)
        add_linear(s, gen, "gen.video", c.d_video, d)
        s.add("gen.null_video", gen.normal(0.0, 1.0, size=c.d_video))
        s.add("gen.null_text", gen.normal(0.0, 1.0, size=c.d_text))
        for i in range(c.n_mm):
            for stream_ in ("a", "t"):
                p = f"gen.mm{i}.{stream_}"
                add_adaln(s, gen, f"{p}.ada1", d, d, c.adaln_gain)
                if stream_ == "t" and i == c.n_mm - 1:
                    # nothing reads the text stream after the last joint block
                    for part in "qkv":
                        add_linear(s, gen, f"{p}.attn.{part}", d, d)
                    continue
                add_attention(s, gen, f"{p}.attn", d, d, d)
                add_adaln(s, gen, f"{p}.ada2", d, d, c.adaln_gain)
                add_mlp(s, gen, f"{p}.mlp", d, d * c.mlp_ratio, gain=0.5)
        for i in range(c.n_sm):
            p = f"gen.sm{i}"
            add_adaln(s, gen, f"{p}.ada1", d, d, c.adaln_gain)
            add_attention(s, gen, f"{p}.attn", d, d, d)
            add_adaln(s, gen, f"{p}.ada2", d, d, c.adaln_gain)
            add_mlp(s, gen, f"{p}.mlp", d, d * c.mlp_ratio, gain=0.5)
        add_adaln(s, gen, "gen.final", d, d, c.adaln_gain)
        self.pos = sinusoidal(np.arange(c.audio_len), d) * c.pos_scale
        self.set_stage(2)

    def set_stage(self, stage: int) -> None:
        """Stage 2 (and joint training) trains W_v, every adaLN layer and the null embeddings."""
        if stage == 0:
            self.store.set_trainable(lambda n: False)
        else:
            self.store.set_trainable(is_stage2_trainable)

    # -- conditioning ---------------------------------------------------------
    def _conditions(self, cond: ConditionSet, t) -> tuple[Tensor, Tensor, Tensor]:
        s, c = self.store, self.config
        video, text = cond.video, cond.text
        if video.shape[1:] != (self.align.shape[1], c.d_video):
            raise ShapeError(f"video tokens {video.shape[1:]} do not match ({self.align.shape[1]}, {c.d_video})")
        if text.shape[-1] != c.d_text:
            raise ShapeError(f"text width {text.shape[-1]} does not match d_text={c.d_text}")
        if cond.video_null.any():
            m = Tensor(cond.video_null.astype(float)[:, None, None])
            video = video * (1.0 - m) + s["gen.null_video"] * m
        if cond.text_null.any():
            m = Tensor(cond.text_null.astype(float)[:, None, None])
            text = text * (1.0 - m) + s["gen.null_text"] * m
        vproj = apply_linear(s, "gen.video", video)  # [B, N, d]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (cond.batch,))
        temb = apply_linear(s, "gen.time", Tensor(sinusoidal(t * c.time_scale, c.dim)))
        temb = temb.reshape(cond.batch, 1, c.dim)
        c_frame = (Tensor(self.align) @ vproj + temb).silu()  # [B, T_a, d]
        c_global = (vproj.mean(axis=1, keepdims=True) + temb).silu()  # [B, 1, d]
        return c_frame, c_global, apply_linear(s, "gen.text_in", text)

    # -- blocks -----------------------------------------------------------------
    def _mm_block(self, i: int, h_a: Tensor, h_t: Tensor, c_a: Tensor, c_t: Tensor) -> tuple[Tensor, Tensor]:
        s, heads = self.store, self.config.heads
        pa, pt = f"gen.mm{i}.a", f"gen.mm{i}.t"
        xa, xt = adaln(h_a, c_a, s, f"{pa}.ada1"), adaln(h_t, c_t, s, f"{pt}.ada1")
        q = concat([apply_linear(s, f"{pt}.attn.q", xt), apply_linear(s, f"{pa}.attn.q", xa)], axis=1)
        k = concat([apply_linear(s, f"{pt}.attn.k", xt), apply_linear(s, f"{pa}.attn.k", xa)], axis=1)
        v = concat([apply_linear(s, f"{pt}.attn.v", xt), apply_linear(s, f"{pa}.attn.v", xa)], axis=1)
        out, _ = scaled_dot_attention(q, k, v, heads)
        n_t = h_t.shape[1]
        h_a = h_a + apply_linear(s, f"{pa}.attn.o", out[:, n_t:])
        if i < self.config.n_mm - 1:
            h_t = h_t + apply_linear(s, f"{pt}.attn.o", out[:, :n_t])
            h_t = h_t + apply_mlp(s, f"{pt}.mlp", adaln(h_t, c_t, s, f"{pt}.ada2"))
        h_a = h_a + apply_mlp(s, f"{pa}.mlp", adaln(h_a, c_a, s, f"{pa}.ada2"))
        return h_a, h_t

    def _sm_block(self, i: int, h: Tensor, c: Tensor) -> Tensor:
        s, p = self.store, f"gen.sm{i}"
        x = adaln(h, c, s, f"{p}.ada1")
        out, _ = scaled_dot_attention(apply_linear(s, f"{p}.attn.q", x), apply_linear(s, f"{p}.attn.k", x),
                                      apply_linear(s, f"{p}.attn.v", x), self.config.heads)
        h = h + apply_linear(s, f"{p}.attn.o", out)
        return h + apply_mlp(s, f"{p}.mlp", adaln(h, c, s, f"{p}.ada2"))

    def forward_velocity(self, a_t, t, cond: ConditionSet) -> Tensor:
        """Velocity ``[B, T_a, d_audio]`` for latents ``a_t`` at times ``t``."""
        c, s = self.config, self.store
        a_t = a_t if isinstance(a_t, Tensor) else Tensor(a_t)
        if a_t.shape[1:] != (c.audio_len, c.d_audio) or a_t.shape[0] != cond.batch:
            raise ShapeError(f"latent shape {a_t.shape} does not match ({cond.batch}, {c.audio_len}, {c.d_audio})")
        c_frame, c_global, h_t = self._conditions(cond, t)
        w_in = s["gen.in.w"]
        h_a = a_t @ w_in + Tensor(self.pos)
        for i in range(c.n_mm):
            h_a, h_t = self._mm_block(i, h_a, h_t, c_frame, c_global)
        for i in range(c.n_sm):
            h_a = self._sm_block(i, h_a, c_frame)
        return adaln(h_a, c_frame, s, "gen.final") @ w_in.swapaxes(0, 1)

    __call__ = forward_velocity


VelocityFn = Callable[[object, object, ConditionSet], Tensor]


def drop_conditions(cond: ConditionSet, p_joint: float, p_text_extra: float, gen: np.random.Generator) -> ConditionSet:
    """Joint null with ``p_joint``; text alone nulled with independent ``p_text_extra``."""
    for p in (p_joint, p_text_extra):
        if not 0.0 <= p <= 1.0:
            raise ConfigError("drop probabilities must lie in [0, 1]")
    b = cond.batch
    joint = gen.random(b) < p_joint
    text_only = gen.random(b) < p_text_extra
    return replace(cond, video_null=cond.video_null | joint, text_null=cond.text_null | joint | text_only)


def cfm_loss(velocity: VelocityFn, a1, cond: ConditionSet, gen: np.random.Generator,
             a0=None, t=None) -> Tensor:
    """Mean squared error between predicted and straight-path target velocity.

    ``a0`` defaults to standard normal noise and ``t`` to one uniform draw per batch row.
    """
    a1 = np.asarray(a1, dtype=np.float64)
    b = a1.shape[0]
    a0 = gen.standard_normal(a1.shape) if a0 is None else np.asarray(a0, dtype=np.float64)
    t = gen.random(b) if t is None else np.asarray(t, dtype=np.float64)
    a_t = interpolate(a0, a1, t)
    diff = velocity(Tensor(a_t), t, cond) - Tensor(a1 - a0)
    return (diff * diff).mean()


def guided_velocity(velocity: VelocityFn, a, t, cond: ConditionSet, config: SamplerConfig) -> np.ndarray:
    g = config.gamma
    if config.guidance == "joint":
        if g == 1.0:
            return velocity(a, t, cond).data
        v_null = velocity(a, t, cond.nulled()).data
        if g == 0.0:
            return v_null
        return v_null + g * (velocity(a, t, cond).data - v_null)
    g_text = g if config.text_gamma is None else config.text_gamma
    v_null = velocity(a, t, cond.nulled()).data
    v_text_null = velocity(a, t, cond.nulled(video=False)).data
    v_cond = velocity(a, t, cond).data
    return v_null + g * (v_text_null - v_null) + g_text * (v_cond - v_text_null)


def sample(velocity: VelocityFn, cond: ConditionSet, config: SamplerConfig, gen: np.random.Generator,
           shape: tuple | None = None, a0=None) -> np.ndarray:
    """Euler integration from ``t=0`` noise with ``t_k = k / steps``."""
    if a0 is None:
        if shape is None:
            raise ShapeError("sample needs a latent shape or an explicit a0")
        a0 = gen.standard_normal(shape)
    a = np.array(a0, dtype=np.float64)
    dt = 1.0 / config.steps
    for k in range(config.steps):
        t = np.full(a.shape[0], k / config.steps)
        a = a + dt * guided_velocity(velocity, Tensor(a), t, cond, config)
    return a


def oracle_velocity(a1) -> VelocityFn:
    """Analytic field ``(a1 - a_t) / (1 - t)`` of the straight path ending at ``a1``."""
    a1 = np.asarray(a1, dtype=np.float64)

    def field(a_t, t, cond=None) -> Tensor:
        a = a_t.data if isinstance(a_t, Tensor) else np.asarray(a_t)
        t = np.asarray(t, dtype=np.float64).reshape(-1, *([1] * (a.ndim - 1)))
        return Tensor((a1 - a) / (1.0 - t))

    return field
