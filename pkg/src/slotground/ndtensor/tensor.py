"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Each operation returns a new `Tensor` whose `_backward` closure knows how
to push the output gradient into its parents. The tape is implicit in the
parent links; `backward()` discovers it with an iterative depth-first
topological sort, so graphs of any depth work without recursion limits.

Conventions fixed here and relied on elsewhere:

- everything is float64; inputs are coerced on construction
- `max` routes gradient only to the winning element, ties broken toward
  the lowest index (numpy argmax order)
- broadcasting follows numpy; gradients of broadcast operands are summed
  back to the operand shape
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """One node of the computation graph: value, gradient, parents."""

    __slots__ = ("value", "grad", "op", "parents", "_backward", "_backward_ran")

    def __init__(self, value, parents=(), op="leaf", backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self.op = op
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._backward = backward_fn
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    # -- reductions / views as methods ----------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(node: Tensor, grad: Array) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += grad


def backward(loss: Tensor) -> None:
    """Populate gradients of every node reachable from a scalar loss.

    A second call on the same node without rebuilding the graph raises:
    gradients would silently double-accumulate otherwise.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward already ran for this node; rebuild the graph or reset gradients")
    loss._backward_ran = True

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in order:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(nodes: Iterable[Tensor]) -> None:
    for node in nodes:
        node.grad = None


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, (a, b), "add")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value - b.value, (a, b), "sub")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value, (a, b), "mul")

    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    out._backward = _bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value / b.value, (a, b), "div")

    def _bw(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.value, (a,), "neg")
    out._backward = lambda g: _accumulate(a, -g)
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    exponent = float(exponent)
    out = Tensor(a.value**exponent, (a,), "pow")
    out._backward = lambda g: _accumulate(a, g * exponent * a.value ** (exponent - 1.0))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.value), (a,), "exp")
    out._backward = lambda g: _accumulate(a, g * out.value)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.value), (a,), "log")
    out._backward = lambda g: _accumulate(a, g / a.value)
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.value), (a,), "sqrt")
    out._backward = lambda g: _accumulate(a, g * 0.5 / out.value)
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.value), (a,), "tanh")
    out._backward = lambda g: _accumulate(a, g * (1.0 - out.value * out.value))
    return out


def sigmoid(a: Tensor) -> Tensor:
    val = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.value))), np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))
    out = Tensor(val, (a,), "sigmoid")
    out._backward = lambda g: _accumulate(a, g * out.value * (1.0 - out.value))
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; gradient routes to the winner (ties favor `a`)."""
    take_a = a.value >= b.value
    out = Tensor(np.where(take_a, a.value, b.value), (a, b), "maximum")

    def _bw(g):
        _accumulate(a, _unbroadcast(g * take_a, a.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    out._backward = _bw
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient routes to the winner (ties favor `a`)."""
    take_a = a.value <= b.value
    out = Tensor(np.where(take_a, a.value, b.value), (a, b), "minimum")

    def _bw(g):
        _accumulate(a, _unbroadcast(g * take_a, a.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.value, 0.0), (a,), "relu")
    out._backward = lambda g: _accumulate(a, g * (a.value > 0.0))
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.value * _INV_SQRT2))
    out = Tensor(a.value * cdf, (a,), "gelu")

    def _bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.value * a.value)
        _accumulate(a, g * (cdf + a.value * pdf))

    out._backward = _bw
    return out


# -- shape manipulation ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics (both operands ndim >= 2)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value, (a, b), "matmul")

    def _bw(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    out._backward = _bw
    return out


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    out = Tensor(np.transpose(a.value, axes), (a,), "transpose")
    inverse = None if axes is None else np.argsort(axes)
    out._backward = lambda g: _accumulate(a, np.transpose(g, inverse))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.value.reshape(shape), (a,), "reshape")
    out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), "concat")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(part, g[tuple(index)])

    out._backward = _bw
    return out


def take(a: Tensor, key) -> Tensor:
    """Basic/advanced indexing; backward scatter-adds into the source."""
    out = Tensor(a.value[key], (a,), "take")

    def _bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        _accumulate(a, full)

    out._backward = _bw
    return out


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup `table[indices]` for an integer index array."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("embedding indices must be integers")
    out = Tensor(table.value[idx], (table,), "embedding")

    def _bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    out._backward = _bw
    return out


# -- reductions -------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum")

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    out._backward = _bw
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max with argmax-routed gradient; ties go to the lowest index."""
    if axis is None:
        val = a.value.max()
        out = Tensor(val if not keepdims else np.full((1,) * a.ndim, val), (a,), "max")
        flat_idx = int(a.value.argmax())

        def _bw_all(g):
            full = np.zeros_like(a.value)
            full.flat[flat_idx] = np.asarray(g).sum()
            _accumulate(a, full)

        out._backward = _bw_all
        return out

    val = a.value.max(axis=axis, keepdims=keepdims)
    idx = a.value.argmax(axis=axis)
    out = Tensor(val, (a,), "max")

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.value)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
        _accumulate(a, full)

    out._backward = _bw
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; rows sum to one."""
    if np.isnan(a.value).any():
        raise ValueError("softmax received NaN input")
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(val, (a,), "softmax")

    def _bw(g):
        dot = (g * val).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - dot) * val)

    out._backward = _bw
    return out


def dropout(a: Tensor, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout; the mask is drawn once at op construction."""
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.uniform(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.value * mask, (a,), "dropout")
    out._backward = lambda g: _accumulate(a, g * mask)
    return out


def cross_entropy_from_logits(logits: Tensor, labels, reduce: str = "mean") -> Tensor:
    """Negative log-likelihood of integer `labels` under row softmax.

    Accepts logits of shape (..., C) and labels of shape (...,).
    `reduce` is "mean", "sum", or "none" (per-row losses).
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    m = max(logits, axis=-1, keepdims=True)
    lse = add(log(sum(exp(sub(logits, m)), axis=-1)), reshape(m, m.shape[:-1]))
    picked = take(logits, tuple(np.indices(labels.shape)) + (labels,))
    nll = sub(lse, picked)
    if reduce == "mean":
        return mean(nll)
    if reduce == "sum":
        return sum(nll)
    if reduce == "none":
        return nll
    raise ValueError(f"unknown reduce mode {reduce!r}")
