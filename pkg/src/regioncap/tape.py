"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything runs in float64. A ``Tensor`` wraps an ndarray and remembers the
operation that produced it; ``backward(root)`` walks the tape once and
accumulates gradients into ``Tensor.grad``. Only the operations needed by the
encoder/fusion/decoder stack are provided; all composite functions (softmax,
GELU, layer norm) are built from these primitives so their gradients come for
free.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _np_erf

Array = np.ndarray

_INV_SQRT_PI = 1.0 / np.sqrt(np.pi)


class Tensor:
    """An ndarray plus the backward rule of the op that produced it."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A leaf tensor; gradients still flow *to* it but it has no parents."""
    return Tensor(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# primitive ops ------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor(a.data / b.data, (a, b), bw)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return Tensor(np.power(a.data, exponent), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics on the leading axes."""

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(np.matmul(a.data, b.data), (a, b), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        return (g.reshape(a.data.shape),)

    return Tensor(a.data.reshape(shape), (a,), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bw(g):
        return (np.swapaxes(g, ax1, ax2),)

    return Tensor(np.swapaxes(a.data, ax1, ax2), (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor(np.transpose(a.data, axes), (a,), bw)


def take(a: Tensor, idx) -> Tensor:
    """Basic indexing / integer-array gather. Gradient scatters with add.at."""

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i, t in enumerate(tensors):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = np.prod([a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return sum_(a, axis=axis, keepdims=keepdims) * as_tensor(1.0 / float(n))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return Tensor(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        return (g / a.data,)

    return Tensor(np.log(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out_data,)

    return Tensor(out_data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out_data * out_data),)

    return Tensor(out_data, (a,), bw)


def erf(a: Tensor) -> Tensor:
    def bw(g):
        return (g * 2.0 * _INV_SQRT_PI * np.exp(-a.data * a.data),)

    return Tensor(_np_erf(a.data), (a,), bw)


def embedding(weight: Tensor, ids: Array) -> Tensor:
    """Row gather for token embeddings: out[i] = weight[ids[i]]."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return Tensor(weight.data[ids], (weight,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# composite functions ------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    return x * (erf(x * as_tensor(1.0 / np.sqrt(2.0))) + 1.0) * 0.5


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # Shifting by a stop-gradient max is exact: the max is piecewise constant.
    m = constant(x.data.max(axis=axis, keepdims=True))
    shifted = x - m
    lse = log(sum_(exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


# engine -------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every tensor in the tape."""
    if root.data.ndim != 0:
        raise ValueError("backward() expects a scalar root")
    root.grad = np.ones_like(root.data)
    for node in reversed(_toposort(root)):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
