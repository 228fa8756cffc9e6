"""Finite-difference verification of analytic gradients.

The checker perturbs every input element by +/- h (central differences),
rebuilds the forward pass each time, and compares against the gradients
the tape produced. Relative error is normalized by the largest gradient
magnitude so elements with tiny true gradients don't dominate.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function at x."""
    x = np.array(x, dtype=np.float64, order="C")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over the larger of the two gradient scales."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / max(scale, 1e-8))


def check_gradients(
    build: Callable[[Sequence[np.ndarray]], tuple[Tensor, Sequence[Tensor]]],
    inputs: Sequence[np.ndarray],
    h: float = 1e-4,
) -> float:
    """Worst relative error over all inputs of a scalar-valued graph.

    `build` receives the raw arrays, wraps whichever it wants in leaf
    tensors, and must return (loss, leaves) where leaves align with
    `inputs`.
    """
    arrays = [np.asarray(x, dtype=np.float64).copy() for x in inputs]
    loss, leaves = build(arrays)
    backward(loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):

        def scalar_fn(perturbed, i=i):
            working = [a.copy() for a in arrays]
            working[i] = perturbed
            out, _ = build(working)
            return float(out.value)

        numeric = numeric_gradient(scalar_fn, arrays[i], h=h)
        worst = max(worst, relative_error(leaf.grad, numeric))
    return worst
