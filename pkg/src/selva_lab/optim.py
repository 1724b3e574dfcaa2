"""AdamW with global-norm clipping, linear warmup and an online EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-6
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_grad_norm: float = 0.0


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale every gradient by ``max_norm / norm`` when the joint norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr_t: float | None = None) -> None:
    """In-place AdamW update of ``params`` (name -> ndarray) from ``grads``.

    Weight decay is decoupled and applied before the moment update, as in the
    common PyTorch formulation.  Missing gradients count as zero.
    """
    lr_t = state.lr if lr_t is None else lr_t
    grads = {k: np.asarray(grads[k], dtype=np.float64) if grads.get(k) is not None else np.zeros_like(p)
             for k, p in params.items()}
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k!r} at step {state.step}")
    if state.clip_norm is not None:
        grads, state.last_grad_norm = clip_by_global_norm(grads, state.clip_norm)
    else:
        state.last_grad_norm = global_norm(grads)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        if state.weight_decay:
            p *= 1.0 - lr_t * state.weight_decay
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, constant after."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


def ema_decay(sigma_rel: float, total_steps: int) -> float:
    """Decay whose averaging window ``1/(1-d)`` spans ``sigma_rel * total_steps`` updates."""
    window = sigma_rel * max(total_steps, 1)
    return 0.0 if window <= 1.0 else 1.0 - 1.0 / window


@dataclass
class EmaState:
    shadow: dict
    decay: float
    sigma_rel: float = 0.05
    count: int = 0

    @classmethod
    def create(cls, params: dict, sigma_rel: float = 0.05, total_steps: int = 1,
               decay: float | None = None) -> "EmaState":
        d = ema_decay(sigma_rel, total_steps) if decay is None else decay
        return cls({k: np.array(v, dtype=np.float64) for k, v in params.items()}, d, sigma_rel)


def ema_update(state: EmaState, params: dict) -> EmaState:
    d = state.decay
    for k, p in params.items():
        s = state.shadow[k]
        if s.shape != np.shape(p):
            raise ShapeError(f"EMA shadow {k!r} has shape {s.shape}, parameter {np.shape(p)}")
        s *= d
        s += (1.0 - d) * p
    state.count += 1
    return state
