"""Parameter containers and the handful of layers shared by the models."""
from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, layer_norm, linear, scaled_dot_attention


class ParamStore:
    """Flat, ordered ``name -> Tensor`` table.

    Trainability is the ``requires_grad`` flag of each tensor; flipping it off
    removes the tensor from every subsequent tape.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(array, dtype=np.float64, order="C"), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name, t in self._params.items():
            t.requires_grad = bool(predicate(name))
            t.grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if t.requires_grad}

    def trainable_flags(self) -> dict[str, bool]:
        return {n: t.requires_grad for n, t in self._params.items()}

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.size for t in self._params.values() if t.requires_grad or not trainable_only)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict, strict: bool = True) -> None:
        for name, t in self._params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r} in state")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name!r}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()


def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))


def orthogonal_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def sinusoidal(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = positions[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def add_linear(store: ParamStore, rng, prefix: str, fan_in: int, fan_out: int, *,
               bias: bool = True, gain: float = 1.0, zero: bool = False) -> None:
    w = np.zeros((fan_in, fan_out)) if zero else dense_init(rng, fan_in, fan_out, gain)
    store.add(f"{prefix}.w", w)
    if bias:
        store.add(f"{prefix}.b", np.zeros(fan_out))


def apply_linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    b = store[f"{prefix}.b"] if f"{prefix}.b" in store else None
    return linear(x, store[f"{prefix}.w"], b)


def add_attention(store: ParamStore, rng, prefix: str, d_q: int, d_kv: int, d: int, *, zero_out: bool = False) -> None:
    add_linear(store, rng, f"{prefix}.q", d_q, d)
    add_linear(store, rng, f"{prefix}.k", d_kv, d)
    add_linear(store, rng, f"{prefix}.v", d_kv, d)
    add_linear(store, rng, f"{prefix}.o", d, d_q, zero=zero_out)


def apply_attention(store: ParamStore, prefix: str, xq: Tensor, xkv: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    q = apply_linear(store, f"{prefix}.q", xq)
    k = apply_linear(store, f"{prefix}.k", xkv)
    v = apply_linear(store, f"{prefix}.v", xkv)
    out, weights = scaled_dot_attention(q, k, v, heads)
    return apply_linear(store, f"{prefix}.o", out), weights


def add_mlp(store: ParamStore, rng, prefix: str, d: int, hidden: int, *, zero_out: bool = False, gain: float = 1.0) -> None:
    add_linear(store, rng, f"{prefix}.fc1", d, hidden)
    add_linear(store, rng, f"{prefix}.fc2", hidden, d, zero=zero_out, gain=gain)


def apply_mlp(store: ParamStore, prefix: str, x: Tensor, act: str = "gelu") -> Tensor:
    hidden = apply_linear(store, f"{prefix}.fc1", x)
    hidden = hidden.relu() if act == "relu" else hidden.gelu()
    return apply_linear(store, f"{prefix}.fc2", hidden)


def _fused_qkv(store: ParamStore, prefix: str, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    names = [f"{prefix}.{k}" for k in "qkv"]
    if any(store[f"{n}.w"].requires_grad or store[f"{n}.b"].requires_grad for n in names) or h.requires_grad:
        return tuple(apply_linear(store, n, h) for n in names)
    # constant path: one wide matmul instead of three
    w = np.concatenate([store[f"{n}.w"].data for n in names], axis=1)
    b = np.concatenate([store[f"{n}.b"].data for n in names])
    out = h.data @ w
    out += b
    d = w.shape[1] // 3
    return Tensor(out[..., :d]), Tensor(out[..., d:2 * d]), Tensor(out[..., 2 * d:])


def self_attention_block(store: ParamStore, prefix: str, x: Tensor, heads: int, act: str = "gelu") -> Tensor:
    """Pre-norm transformer block: attention then MLP, both residual."""
    h = layer_norm(x)
    q, k, v = _fused_qkv(store, f"{prefix}.attn", h)
    out, _ = scaled_dot_attention(q, k, v, heads)
    attn = apply_linear(store, f"{prefix}.attn.o", out)
    x = x + attn
    return x + apply_mlp(store, f"{prefix}.mlp", layer_norm(x), act)
