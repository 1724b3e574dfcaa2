"""Dense float64 tensors with a reverse-mode gradient tape.

Every op returns a new :class:`Tensor`.  An op only records itself on the tape
when at least one input has ``requires_grad`` set, so frozen weights applied to
constant inputs never appear in a backward pass.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DTYPE = np.float64
LN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- tape plumbing ------------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if not self.requires_grad:
            raise NumericError("backward() called on a tensor that is not on the tape")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._result(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._result(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._result(a / b, (self, other), backward)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ConfigError("only constant exponents are supported")
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._result(a ** exponent, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation -------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._result(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape
        fancy = _is_fancy(idx)

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor._result(self.data[idx], (self,), backward)

    def take(self, indices, axis: int = 0) -> "Tensor":
        """Gather along ``axis``; repeated indices accumulate in backward."""
        indices = np.asarray(indices, dtype=np.intp)
        shape = self.shape
        axis = axis % self.ndim

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            moved = np.moveaxis(full, axis, 0)
            g_moved = np.moveaxis(g, axis, 0)
            np.add.at(moved, indices, g_moved)
            return (full,)

        return Tensor._result(np.take(self.data, indices, axis=axis), (self,), backward)

    # -- pointwise nonlinearities --------------------------------------------
    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._result(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        return Tensor._result(y, (self,), lambda g: (g * 0.5 / y,))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._result(y, (self,), lambda g: (g * (1.0 - y * y),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._result(self.data * mask, (self,), lambda g: (g * mask,))

    def silu(self) -> "Tensor":
        a = self.data
        s = 1.0 / (1.0 + np.exp(-a))

        def backward(g):
            return (g * (s * (1.0 + a * (1.0 - s))),)

        return Tensor._result(a * s, (self,), backward)

    def gelu(self) -> "Tensor":
        # tanh approximation
        a = self.data
        c = math.sqrt(2.0 / math.pi)
        a2 = a * a
        t = np.tanh(c * a * (1.0 + 0.044715 * a2))

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * a2)
            return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

        return Tensor._result(0.5 * a * (1.0 + t), (self,), backward)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)


def _is_fancy(idx) -> bool:
    if isinstance(idx, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in idx)
    return isinstance(idx, (list, np.ndarray))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if b.requires_grad:
            if x.ndim > 2 and y.ndim == 2:
                # fold batch axes into one big matmul instead of summing afterwards
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return Tensor._result(x @ y, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    expanded = [t.reshape(t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), backward)


def layer_norm(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("layer_norm needs a non-empty last axis")
    a = x.data
    xhat = a - a.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / a.shape[-1]
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._result(xhat, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., n, d] -> [..., heads, n, d/heads]."""
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    nd = len(lead)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, n, dh] -> [..., n, heads*dh]."""
    *lead, h, n, dh = x.shape
    nd = len(lead)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2).reshape(*lead, n, h * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head softmax attention.

    ``q`` is ``[..., n_q, d_k]``, ``k`` is ``[..., n_k, d_k]`` and ``v`` is
    ``[..., n_k, d_v]``.  Returns the merged output ``[..., n_q, d_v]`` and the
    weights ``[..., heads, n_q, n_k]``.
    """
    if heads < 1:
        raise ConfigError("heads must be positive")
    d_k, d_v = q.shape[-1], v.shape[-1]
    if d_k % heads or d_v % heads:
        raise ConfigError(f"d_k={d_k} and d_v={d_v} must be divisible by heads={heads}")
    if k.shape[-1] != d_k or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"incompatible attention shapes {q.shape}, {k.shape}, {v.shape}")
    qh = split_heads(q * (1.0 / math.sqrt(d_k // heads)), heads)
    kh, vh = split_heads(k, heads), split_heads(v, heads)
    scores = matmul(qh, kh.swapaxes(-1, -2))
    weights = softmax(scores, axis=-1)
    return merge_heads(matmul(weights, vh)), weights


def grad_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is a zero-argument closure returning a scalar tensor that depends on
    ``x`` (a tensor or several).  The inputs are perturbed in place and
    restored afterwards.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise NumericError("non-finite loss at the check point")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        for t, ga in zip(xs, analytic):
            for i in np.ndindex(t.data.shape):
                orig = t.data[i]
                t.data[i] = orig + step
                fp = f().item()
                t.data[i] = orig - step
                fm = f().item()
                t.data[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"non-finite value while perturbing coordinate {i}")
                numeric = (fp - fm) / (2.0 * step)
                worst = max(worst, abs(ga[i] - numeric) / max(abs(numeric), 1e-6))
        return worst
    finally:
        for t, flag in zip(xs, saved):
            t.requires_grad = flag
            t.grad = None
