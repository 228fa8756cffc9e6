"""Scene and schema encoders plus the shared-space projection heads.

All forward passes are written batched. Scenes travel as (B, L, c)
feature grids, slots as (B, K, d), schemas as padded (B, N_max, d) with a
0/1 validity mask. The single-instance entry points the rest of the
package exposes are thin wrappers over batches of one.

Slot attention follows the iterative competitive-binding recipe: per
iteration the slots are layer-normalized, attention logits k(H) q(S)^T /
sqrt(D) are softmaxed across slots so slots compete per feature cell, the
per-slot weighted mean of v(H) forms the update, and a GRU folds the
update into the slot state. Values are computed from the features, not
the slots: the update must summarize what each slot currently explains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndtensor import Rng, Tensor
from .ndtensor import tensor as ops
from .ndtensor.nn import gru_cell, layernorm, mlp, multi_head_attention
from .params import ParamStore, glorot
from .schema import ContinuousProperty, DiscreteProperty, PropertySpace, SchemaInstance


@dataclass
class ModelDims:
    """Architecture widths; defaults are the desk-scale configuration."""

    num_slots: int = 6
    slot_dim: int = 32
    feature_dim: int = 24
    grid_cells: int = 64
    proj_dim: int = 16
    prop_embed_dim: int = 16
    schema_layers: int = 2
    schema_heads: int = 4
    sa_iters: int = 3
    decoder_hidden: int = 64
    head_hidden: int = 64
    fusion_hidden: int = 64
    max_schema_len: int = 8
    use_schema_pos: bool = True


@dataclass
class DropoutPlan:
    """Dropout configuration threaded through training forward passes."""

    rate: float
    rng: Rng

    def apply(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.rate, self.rng)


def _maybe_drop(x: Tensor, drop: DropoutPlan | None) -> Tensor:
    return drop.apply(x) if drop is not None and drop.rate > 0 else x


# -- parameter initialization ------------------------------------------------


def init_slot_attention(store: ParamStore, rng: Rng, dims: ModelDims) -> None:
    d, c = dims.slot_dim, dims.feature_dim
    store.add("sa.mu", rng.normal((d,), scale=0.5))
    store.add("sa.log_sigma", np.full((d,), np.log(0.5)))
    # Learned grid-position embedding added to the features before the
    # key/value projections; without it slots cannot carry location.
    store.add("sa.pos", rng.normal((dims.grid_cells, c), scale=0.1))
    store.add("sa.norm_in.gain", np.ones(c))
    store.add("sa.norm_in.bias", np.zeros(c))
    store.add("sa.norm_slot.gain", np.ones(d))
    store.add("sa.norm_slot.bias", np.zeros(d))
    store.add("sa.q", glorot(rng, d, d))
    store.add("sa.k", glorot(rng, c, d))
    store.add("sa.v", glorot(rng, c, d))
    for gate in ("z", "r", "h"):
        store.add(f"sa.gru.w{gate}", glorot(rng, d, d))
        store.add(f"sa.gru.u{gate}", glorot(rng, d, d))
        store.add(f"sa.gru.b{gate}", np.zeros(d))
    # Residual slot MLP after the GRU, as in the standard recipe.
    store.add("sa.norm_mlp.gain", np.ones(d))
    store.add("sa.norm_mlp.bias", np.zeros(d))
    store.add("sa.mlp.w0", glorot(rng, d, 2 * d))
    store.add("sa.mlp.b0", np.zeros(2 * d))
    store.add("sa.mlp.w1", glorot(rng, 2 * d, d))
    store.add("sa.mlp.b1", np.zeros(d))


def init_decoder(store: ParamStore, rng: Rng, dims: ModelDims) -> None:
    d, h, c = dims.slot_dim, dims.decoder_hidden, dims.feature_dim
    store.add("dec.pos", rng.normal((dims.grid_cells, d), scale=0.02))
    store.add("dec.w0", glorot(rng, d, h))
    store.add("dec.b0", np.zeros(h))
    store.add("dec.w1", glorot(rng, h, h))
    store.add("dec.b1", np.zeros(h))
    store.add("dec.w2", glorot(rng, h, c + 1))
    store.add("dec.b2", np.zeros(c + 1))


def init_primitive_encoder(store: ParamStore, rng: Rng, dims: ModelDims, space: PropertySpace) -> None:
    e = dims.prop_embed_dim
    for prop in space:
        if isinstance(prop, DiscreteProperty):
            store.add(f"prim.dict.{prop.name}", rng.normal((len(prop.vocab), e), scale=0.5))
        else:
            store.add(f"prim.mlp.{prop.name}.w0", glorot(rng, prop.dim, e))
            store.add(f"prim.mlp.{prop.name}.b0", np.zeros(e))
            store.add(f"prim.mlp.{prop.name}.w1", glorot(rng, e, e))
            store.add(f"prim.mlp.{prop.name}.b1", np.zeros(e))
    fused_in, h, d = len(space) * e, dims.fusion_hidden, dims.slot_dim
    store.add("prim.fuse.w0", glorot(rng, fused_in, h))
    store.add("prim.fuse.b0", np.zeros(h))
    store.add("prim.fuse.w1", glorot(rng, h, d))
    store.add("prim.fuse.b1", np.zeros(d))


def init_transformer_block(store: ParamStore, rng: Rng, prefix: str, d: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.attn.{name}", glorot(rng, d, d))
    for name in ("bq", "bk", "bv", "bo"):
        store.add(f"{prefix}.attn.{name}", np.zeros(d))
    store.add(f"{prefix}.norm1.gain", np.ones(d))
    store.add(f"{prefix}.norm1.bias", np.zeros(d))
    store.add(f"{prefix}.norm2.gain", np.ones(d))
    store.add(f"{prefix}.norm2.bias", np.zeros(d))
    store.add(f"{prefix}.ffn.w0", glorot(rng, d, 2 * d))
    store.add(f"{prefix}.ffn.b0", np.zeros(2 * d))
    store.add(f"{prefix}.ffn.w1", glorot(rng, 2 * d, d))
    store.add(f"{prefix}.ffn.b1", np.zeros(d))


def init_schema_transformer(store: ParamStore, rng: Rng, dims: ModelDims) -> None:
    d = dims.slot_dim
    store.add("tsch.pos", rng.normal((dims.max_schema_len, d), scale=0.02))
    for layer in range(dims.schema_layers):
        init_transformer_block(store, rng, f"tsch.l{layer}", d)
    store.add("tsch.norm_out.gain", np.ones(d))
    store.add("tsch.norm_out.bias", np.zeros(d))


def init_projection_head(store: ParamStore, rng: Rng, dims: ModelDims, prefix: str, in_dim: int) -> None:
    p, h = dims.proj_dim, dims.head_hidden
    # Small-scale projection and a zero residual branch keep initial pair
    # scores near-exchangeable, so the contrastive loss starts at ~log B.
    store.add(f"{prefix}.w", rng.normal((in_dim, p), scale=0.02))
    store.add(f"{prefix}.norm.gain", np.ones(p))
    store.add(f"{prefix}.norm.bias", np.zeros(p))
    store.add(f"{prefix}.mlp.w0", glorot(rng, p, h))
    store.add(f"{prefix}.mlp.b0", np.zeros(h))
    store.add(f"{prefix}.mlp.w1", np.zeros((h, p)))
    store.add(f"{prefix}.mlp.b1", np.zeros(p))


def init_alignment_model(rng: Rng, dims: ModelDims, space: PropertySpace) -> ParamStore:
    """Full grounding model: scene encoder + schema encoder + both heads."""
    store = ParamStore()
    init_slot_attention(store, rng.derive("sa"), dims)
    init_decoder(store, rng.derive("dec"), dims)
    init_primitive_encoder(store, rng.derive("prim"), dims, space)
    init_schema_transformer(store, rng.derive("tsch"), dims)
    init_projection_head(store, rng.derive("proj_scene"), dims, "proj_scene", dims.slot_dim)
    init_projection_head(store, rng.derive("proj_schema"), dims, "proj_schema", dims.slot_dim)
    return store


# -- scene side ---------------------------------------------------------------


def sample_initial_slots(params: ParamStore, rng: Rng, batch: int, dims: ModelDims) -> Tensor:
    """Reparameterized draw from the learned slot-init Gaussian."""
    eps = rng.normal((batch, dims.num_slots, dims.slot_dim))
    return params["sa.mu"] + ops.exp(params["sa.log_sigma"]) * Tensor(eps)


def slot_attention(
    params: ParamStore,
    features: Tensor,
    dims: ModelDims,
    initial_slots: Tensor,
    eps: float = 1e-8,
) -> tuple[Tensor, Tensor]:
    """Iterative slot refinement.

    features: (B, L, c); initial_slots: (B, K, d).
    Returns final slots (B, K, d) and the final-iteration attention map
    (B, L, K), whose rows (one per cell) sum to one across slots.
    """
    if features.ndim != 3:
        raise ValueError(f"features must be (B, L, c), got {features.shape}")
    located = ops.add(features, params["sa.pos"])
    h = layernorm(located, params["sa.norm_in.gain"], params["sa.norm_in.bias"])
    keys = ops.matmul(h, params["sa.k"])  # (B, L, D)
    values = ops.matmul(h, params["sa.v"])  # (B, L, D)
    scale = 1.0 / np.sqrt(dims.slot_dim)

    slots = initial_slots
    attn = None
    for _ in range(dims.sa_iters):
        normed = layernorm(slots, params["sa.norm_slot.gain"], params["sa.norm_slot.bias"])
        queries = ops.matmul(normed, params["sa.q"])  # (B, K, D)
        logits = ops.mul(ops.matmul(keys, ops.transpose(queries, (0, 2, 1))), Tensor(scale))
        attn = ops.softmax(logits, axis=-1)  # slots compete per cell
        weights = ops.div(attn, ops.add(ops.sum(attn, axis=1, keepdims=True), Tensor(eps)))
        updates = ops.matmul(ops.transpose(weights, (0, 2, 1)), values)  # (B, K, D)
        slots = gru_cell(slots, updates, params, "sa.gru")
        normed = layernorm(slots, params["sa.norm_mlp.gain"], params["sa.norm_mlp.bias"])
        slots = ops.add(
            slots,
            mlp(normed, [(params["sa.mlp.w0"], params["sa.mlp.b0"]), (params["sa.mlp.w1"], params["sa.mlp.b1"])]),
        )
    return slots, attn


def decode_slots(params: ParamStore, slots: Tensor, dims: ModelDims) -> tuple[Tensor, Tensor]:
    """Spatial broadcast decoding.

    Every slot is broadcast to all L cells, offset by a learned position
    embedding, and run through the MLP; per-cell alpha logits are
    softmaxed across slots and mix the per-slot feature predictions.
    Returns (reconstruction (B, L, c), alphas (B, K, L)).
    """
    b, k, d = slots.shape
    broadcast = ops.add(ops.reshape(slots, (b, k, 1, d)), params["dec.pos"])  # (B, K, L, d)
    hidden = mlp(
        broadcast,
        [
            (params["dec.w0"], params["dec.b0"]),
            (params["dec.w1"], params["dec.b1"]),
            (params["dec.w2"], params["dec.b2"]),
        ],
    )
    feats = hidden[:, :, :, : dims.feature_dim]
    alpha = ops.softmax(hidden[:, :, :, dims.feature_dim :], axis=1)  # across slots
    recon = ops.sum(ops.mul(alpha, feats), axis=1)  # (B, L, c)
    return recon, ops.reshape(alpha, (b, k, dims.grid_cells))


def reconstruction_loss(recon: Tensor, features: Tensor) -> Tensor:
    """Mean squared feature reconstruction error."""
    diff = ops.sub(recon, features)
    return ops.mean(ops.mul(diff, diff))


# -- schema side ----------------------------------------------------------------


def batch_property_arrays(
    instances: list[SchemaInstance], space: PropertySpace, pad_to: int | None = None
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Pack instances into padded per-property arrays plus a validity mask."""
    max_n = max((len(inst) for inst in instances), default=0)
    if pad_to is not None:
        max_n = max(max_n, pad_to)
    b = len(instances)
    mask = np.zeros((b, max_n))
    arrays: dict[str, np.ndarray] = {}
    for prop in space:
        if isinstance(prop, DiscreteProperty):
            arrays[prop.name] = np.zeros((b, max_n), dtype=np.int64)
        else:
            arrays[prop.name] = np.zeros((b, max_n, prop.dim))
    for i, inst in enumerate(instances):
        for j, prim in enumerate(inst.primitives):
            mask[i, j] = 1.0
            for prop in space:
                val = prim.values[prop.name]
                if isinstance(prop, DiscreteProperty):
                    arrays[prop.name][i, j] = prop.vocab.index(val)
                else:
                    arrays[prop.name][i, j] = val
    return arrays, mask


def encode_primitive_batch(
    params: ParamStore,
    arrays: dict[str, np.ndarray],
    space: PropertySpace,
) -> Tensor:
    """Context-free primitive embeddings (B, N_max, d) from packed arrays."""
    parts: list[Tensor] = []
    for prop in space:
        if isinstance(prop, DiscreteProperty):
            parts.append(ops.embedding(params[f"prim.dict.{prop.name}"], arrays[prop.name]))
        else:
            parts.append(
                mlp(
                    Tensor(arrays[prop.name]),
                    [
                        (params[f"prim.mlp.{prop.name}.w0"], params[f"prim.mlp.{prop.name}.b0"]),
                        (params[f"prim.mlp.{prop.name}.w1"], params[f"prim.mlp.{prop.name}.b1"]),
                    ],
                )
            )
    fused = ops.concat(parts, axis=-1)
    return mlp(
        fused,
        [(params["prim.fuse.w0"], params["prim.fuse.b0"]), (params["prim.fuse.w1"], params["prim.fuse.b1"])],
    )


def transformer_block(
    params: ParamStore,
    prefix: str,
    x: Tensor,
    num_heads: int,
    key_mask: np.ndarray | None,
    drop: DropoutPlan | None = None,
) -> Tensor:
    """Pre-norm encoder block: self-attention then feed-forward."""
    normed = layernorm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
    attended = multi_head_attention(normed, normed, params, f"{prefix}.attn", num_heads, key_mask)
    x = ops.add(x, _maybe_drop(attended, drop))
    normed = layernorm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])
    ff = mlp(
        normed,
        [(params[f"{prefix}.ffn.w0"], params[f"{prefix}.ffn.b0"]), (params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"])],
        activation=ops.gelu,
    )
    return ops.add(x, _maybe_drop(ff, drop))


def schema_transformer(
    params: ParamStore,
    z_prim: Tensor,
    mask: np.ndarray,
    dims: ModelDims,
    drop: DropoutPlan | None = None,
) -> Tensor:
    """Bidirectional contextualization of primitive embeddings."""
    n = z_prim.shape[-2]
    if n > dims.max_schema_len:
        raise ValueError(f"schema length {n} exceeds positional table ({dims.max_schema_len})")
    x = z_prim
    if dims.use_schema_pos:
        x = ops.add(x, params["tsch.pos"][:n, :])
    for layer in range(dims.schema_layers):
        x = transformer_block(params, f"tsch.l{layer}", x, dims.schema_heads, mask, drop)
    return layernorm(x, params["tsch.norm_out.gain"], params["tsch.norm_out.bias"])


def encode_schemas(
    params: ParamStore,
    instances: list[SchemaInstance],
    space: PropertySpace,
    dims: ModelDims,
    drop: DropoutPlan | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Instances -> contextualized primitive embeddings (B, N_max, d) + mask."""
    if any(len(inst) == 0 for inst in instances):
        raise ValueError("cannot encode an empty schema instance")
    arrays, mask = batch_property_arrays(instances, space)
    z_prim = encode_primitive_batch(params, arrays, space)
    return schema_transformer(params, z_prim, mask, dims, drop), mask


def projection_head(params: ParamStore, prefix: str, x: Tensor, drop: DropoutPlan | None = None) -> Tensor:
    """Residual projection into the shared space (rows not normalized)."""
    tilde = ops.matmul(x, params[f"{prefix}.w"])
    normed = layernorm(tilde, params[f"{prefix}.norm.gain"], params[f"{prefix}.norm.bias"])
    correction = mlp(
        normed,
        [(params[f"{prefix}.mlp.w0"], params[f"{prefix}.mlp.b0"]), (params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])],
    )
    return ops.add(tilde, _maybe_drop(correction, drop))


# -- single-instance conveniences ----------------------------------------------


def encode_scene(
    params: ParamStore, features: np.ndarray, dims: ModelDims, rng: Rng
) -> tuple[Tensor, Tensor]:
    """Slots and attention map for a single (L, c) scene."""
    feats = Tensor(features[None])
    init = sample_initial_slots(params, rng, 1, dims)
    slots, attn = slot_attention(params, feats, dims, init)
    return ops.reshape(slots, slots.shape[1:]), ops.reshape(attn, attn.shape[1:])


def encode_primitives(params: ParamStore, inst: SchemaInstance, space: PropertySpace) -> Tensor:
    """Context-free embeddings (N, d) for one instance."""
    if len(inst) == 0:
        return Tensor(np.zeros((0, params["prim.fuse.w1"].shape[1])))
    arrays, _ = batch_property_arrays([inst], space)
    z = encode_primitive_batch(params, arrays, space)
    return ops.reshape(z, z.shape[1:])


def encode_schema(params: ParamStore, z_prim: Tensor, dims: ModelDims) -> Tensor:
    """Contextualize (N, d) primitive embeddings for one instance."""
    n = z_prim.shape[0]
    if n < 1:
        raise ValueError("encode_schema requires at least one primitive")
    batched = ops.reshape(z_prim, (1,) + z_prim.shape)
    out = schema_transformer(params, batched, np.ones((1, n)), dims)
    return ops.reshape(out, z_prim.shape)
