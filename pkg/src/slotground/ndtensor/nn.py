"""Neural building blocks composed from the primitive tensor ops.

Because these are compositions, their backward passes come for free and
inherit the finite-difference guarantees of the primitives.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as ops
from .tensor import Tensor


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x @ weight (+ bias)."""
    out = ops.matmul(x, weight)
    if bias is not None:
        out = ops.add(out, bias)
    return out


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]], activation=ops.relu) -> Tensor:
    """Feed-forward stack; activation between layers, none after the last."""
    out = x
    for i, (w, b) in enumerate(layers):
        out = linear(out, w, b)
        if i + 1 < len(layers):
            out = activation(out)
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 2:
        raise ValueError("layernorm needs at least 2 features on the last axis")
    mu = ops.mean(x, axis=-1, keepdims=True)
    centered = ops.sub(x, mu)
    var = ops.mean(ops.mul(centered, centered), axis=-1, keepdims=True)
    normed = ops.div(centered, ops.sqrt(ops.add(var, Tensor(eps))))
    return ops.add(ops.mul(normed, gain), bias)


def gru_cell(state: Tensor, inp: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Row-wise gated recurrent unit update.

    Gate convention: ``out = z * state + (1 - z) * candidate`` so a
    saturated update gate (large b_z) carries the state through unchanged,
    while z = 0 with reset gate 1 yields the plain tanh candidate of the
    input path.
    """
    if state.shape != inp.shape:
        raise ValueError(f"gru_cell state/input shapes disagree: {state.shape} vs {inp.shape}")
    p = lambda name: params[f"{prefix}.{name}"]
    z = ops.sigmoid(linear(inp, p("wz")) + linear(state, p("uz")) + p("bz"))
    r = ops.sigmoid(linear(inp, p("wr")) + linear(state, p("ur")) + p("br"))
    cand = ops.tanh(linear(inp, p("wh")) + linear(ops.mul(r, state), p("uh")) + p("bh"))
    one = Tensor(1.0)
    return ops.add(ops.mul(z, state), ops.mul(ops.sub(one, z), cand))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    num_heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention.

    `x_q` is (..., T_q, d), `x_kv` is (..., T_k, d). `key_mask`, when
    given, is a (..., T_k) array with 1 for attendable keys and 0 for
    padding; masked keys receive a large negative score.
    """
    d = x_q.shape[-1]
    if d % num_heads != 0:
        raise ValueError(f"model width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    p = lambda name: params[f"{prefix}.{name}"]

    def split_heads(t: Tensor) -> Tensor:
        # (..., T, d) -> (..., heads, T, dh)
        new_shape = t.shape[:-1] + (num_heads, dh)
        perm = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2, t.ndim)
        return ops.transpose(ops.reshape(t, new_shape), perm)

    q = split_heads(linear(x_q, p("wq"), p("bq")))
    k = split_heads(linear(x_kv, p("wk"), p("bk")))
    v = split_heads(linear(x_kv, p("wv"), p("bv")))

    scores = ops.mul(ops.matmul(q, ops.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), Tensor(1.0 / np.sqrt(dh)))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e30)
        bias = bias[..., None, None, :]  # broadcast over heads and queries
        scores = ops.add(scores, Tensor(bias))
    attn = ops.softmax(scores, axis=-1)
    mixed = ops.matmul(attn, v)  # (..., heads, T_q, dh)

    perm = tuple(range(mixed.ndim - 3)) + (mixed.ndim - 2, mixed.ndim - 3, mixed.ndim - 1)
    merged = ops.reshape(ops.transpose(mixed, perm), x_q.shape[:-1] + (d,))
    return linear(merged, p("wo"), p("bo"))
