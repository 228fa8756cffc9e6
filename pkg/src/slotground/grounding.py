"""Compositional scene-schema scoring and the contrastive objective.

The pair score sums, over schema primitives, each primitive's best
dot-product similarity against any slot in the shared projection space.
Several primitives may pick the same slot; gradient flows only through
the winning slot of each primitive (argmax treated as piecewise
constant, ties to the lowest slot index).

Also here: the symmetric InfoNCE-style loss over a batch score matrix,
the training-loss combination, the mutual-information lower bound, and
the two retrieval baselines (bijective property-prediction matching and
ground-truth-box feature averaging).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .matching import hungarian
from .ndtensor import Tensor
from .ndtensor import tensor as ops
from .params import ParamStore, glorot
from .ndtensor import Rng
from .schema import ContinuousProperty, DiscreteProperty, PropertySpace, SchemaInstance

logger = logging.getLogger(__name__)


@dataclass
class Assignment:
    """One primitive's chosen slot and the similarity that won."""

    primitive: int
    slot: int
    similarity: float


AssignmentMap = list[Assignment]


def score_pair(y_scene: Tensor, y_schema: Tensor) -> tuple[Tensor, AssignmentMap]:
    """Score one (scene, schema) pair.

    y_scene: (K, p) projected slots; y_schema: (N, p) projected
    primitives. Returns the scalar score and the primitive -> slot
    assignment actually used.
    """
    k, n = y_scene.shape[0], y_schema.shape[0]
    if n == 0:
        logger.warning("scoring a schema with zero primitives; score is 0")
        return Tensor(0.0), []
    if k == 0:
        raise ValueError("score_pair needs at least one slot")
    dots = ops.matmul(y_scene, ops.transpose(y_schema))  # (K, N)
    best = ops.max(dots, axis=0)
    score = ops.sum(best)
    winners = dots.value.argmax(axis=0)
    assignment = [
        Assignment(primitive=j, slot=int(winners[j]), similarity=float(dots.value[winners[j], j]))
        for j in range(n)
    ]
    return score, assignment


def score_matrix(
    y_scenes: Tensor,
    y_schemas: Tensor,
    schema_mask: np.ndarray,
    scene_mask: np.ndarray | None = None,
) -> Tensor:
    """All-pairs scores (B_x, B_y) for batched projections.

    y_scenes: (B_x, K, p); y_schemas: (B_y, N_max, p) padded, with
    schema_mask (B_y, N_max) marking real primitives. `scene_mask`
    (B_x, K), when given, excludes padded scene rows from the max (used
    when scenes are encoded as variable-length region sets).
    """
    bx, k, p = y_scenes.shape
    by, n, _ = y_schemas.shape
    a = ops.reshape(y_scenes, (bx, 1, k, p))
    b = ops.reshape(ops.transpose(y_schemas, (0, 2, 1)), (1, by, p, n))
    dots = ops.matmul(a, b)  # (B_x, B_y, K, N)
    if scene_mask is not None:
        bias = np.where(np.asarray(scene_mask, dtype=bool), 0.0, -1e30)
        dots = ops.add(dots, Tensor(bias[:, None, :, None]))
    best = ops.max(dots, axis=2)  # (B_x, B_y, N)
    masked = ops.mul(best, Tensor(schema_mask[None, :, :]))
    return ops.sum(masked, axis=2)


@dataclass
class LossBreakdown:
    """Scalar diagnostics of one training objective evaluation."""

    l_schema: float
    l_scene: float
    l_contrastive: float
    l_recon: float
    l_train: float
    beta_contrastive: float
    beta_recon: float
    infonce_bound: float


def contrastive_loss(scores: Tensor, temperature: float) -> tuple[Tensor, Tensor, Tensor]:
    """Symmetric batch-classification loss over a square score matrix.

    Returns (l_contrastive, l_schema, l_scene): cross-entropy with the
    diagonal as labels, applied to rows of scores/temperature and of its
    transpose, each averaged over the batch.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    b1, b2 = scores.shape
    if b1 != b2:
        raise ValueError(f"score matrix must be square, got {scores.shape}")
    labels = np.arange(b1)
    logits = ops.mul(scores, Tensor(1.0 / temperature))
    l_schema = ops.cross_entropy_from_logits(logits, labels)
    l_scene = ops.cross_entropy_from_logits(ops.transpose(logits), labels)
    l_contrastive = ops.mul(ops.add(l_schema, l_scene), Tensor(0.5))
    return l_contrastive, l_schema, l_scene


def total_loss(l_contrastive: Tensor, l_recon: Tensor, beta_contrastive: float, beta_recon: float) -> Tensor:
    """Weighted objective; (0, 1) reduces to pure feature autoencoding."""
    if beta_contrastive < 0 or beta_recon < 0:
        raise ValueError("loss weights must be non-negative")
    return ops.add(
        ops.mul(l_contrastive, Tensor(beta_contrastive)), ops.mul(l_recon, Tensor(beta_recon))
    )


def infonce_bound(l_contrastive: float, batch_size: int) -> float:
    """Lower bound on scene-schema mutual information: log B - loss."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return float(np.log(batch_size) - l_contrastive)


# -- bijective-matching baseline ------------------------------------------------


def init_property_predictor(store: ParamStore, rng: Rng, slot_dim: int, space: PropertySpace, hidden: int = 64) -> None:
    """Per-slot property head: 2 hidden layers, one output block per property."""
    out = 0
    for prop in space:
        out += len(prop.vocab) if isinstance(prop, DiscreteProperty) else prop.dim
    store.add("pred.w0", glorot(rng, slot_dim, hidden))
    store.add("pred.b0", np.zeros(hidden))
    store.add("pred.w1", glorot(rng, hidden, hidden))
    store.add("pred.b1", np.zeros(hidden))
    store.add("pred.w2", glorot(rng, hidden, out))
    store.add("pred.b2", np.zeros(out))


def predict_properties(params: ParamStore, slots: Tensor) -> Tensor:
    """Concatenated per-property logits/values for each slot (..., out)."""
    from .ndtensor.nn import mlp

    return mlp(
        slots,
        [
            (params["pred.w0"], params["pred.b0"]),
            (params["pred.w1"], params["pred.b1"]),
            (params["pred.w2"], params["pred.b2"]),
        ],
    )


def _property_slices(space: PropertySpace) -> list[tuple[str, str, slice]]:
    slices = []
    offset = 0
    for prop in space:
        width = len(prop.vocab) if isinstance(prop, DiscreteProperty) else prop.dim
        slices.append((prop.name, prop.kind, slice(offset, offset + width)))
        offset += width
    return slices


def property_cost_matrix(predictions: np.ndarray, inst: SchemaInstance, space: PropertySpace) -> np.ndarray:
    """Prediction loss of every slot against every primitive (K, N).

    Cross-entropy (from logits) for discrete properties, squared error
    summed over components for continuous ones.
    """
    k = predictions.shape[0]
    n = len(inst)
    cost = np.zeros((k, n))
    for name, kind, block in _property_slices(space):
        pred = predictions[:, block]
        if kind == "discrete":
            vocab = space[name].vocab
            shifted = pred - pred.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            for j, prim in enumerate(inst.primitives):
                cost[:, j] -= log_probs[:, vocab.index(prim.values[name])]
        else:
            targets = np.array([prim.values[name] for prim in inst.primitives])
            cost += ((pred[:, None, :] - targets[None, :, :]) ** 2).sum(axis=-1)
    return cost


def hmc_match(predictions: np.ndarray, inst: SchemaInstance, space: PropertySpace) -> tuple[list[int], float]:
    """Optimal slot-per-primitive assignment under the prediction loss.

    Returns (slot index per primitive, total matching cost). When there
    are more primitives than slots, the surplus primitives stay
    unmatched (no-object padding) and contribute zero cost.
    """
    if len(inst) > predictions.shape[0]:
        logger.warning(
            "schema has %d primitives but only %d slots; padding with no-object targets",
            len(inst),
            predictions.shape[0],
        )
    cost = property_cost_matrix(predictions, inst, space)
    assignment, total = hungarian(cost.T, refine=False)  # rows = primitives
    return assignment, total


def hmc_baseline_score(predictions: np.ndarray, inst: SchemaInstance, space: PropertySpace) -> float:
    """Retrieval score for the bijective-matching baseline: negated cost."""
    _, total = hmc_match(predictions, inst, space)
    return -total


def hmc_training_loss(
    params: ParamStore,
    slots: Tensor,
    instances: list[SchemaInstance],
    space: PropertySpace,
) -> Tensor:
    """Mean matched prediction loss over a batch, differentiable.

    The assignment is recomputed from current predictions; gradient flows
    only through the matched (slot, primitive) pairs.
    """
    predictions = predict_properties(params, slots)  # (B, K, out)
    b = len(instances)
    scene_idx: list[int] = []
    slot_idx: list[int] = []
    matched_prims: list = []
    for i, inst in enumerate(instances):
        assignment, _ = hmc_match(predictions.value[i], inst, space)
        for j, prim in enumerate(inst.primitives):
            if assignment[j] >= 0:
                scene_idx.append(i)
                slot_idx.append(assignment[j])
                matched_prims.append(prim)
    if not matched_prims:
        return Tensor(0.0)

    rows = predictions[np.asarray(scene_idx), np.asarray(slot_idx), :]  # (M, out)
    total = Tensor(0.0)
    for name, kind, block in _property_slices(space):
        pred = rows[:, block]
        if kind == "discrete":
            vocab = space[name].vocab
            labels = np.array([vocab.index(p.values[name]) for p in matched_prims])
            total = ops.add(total, ops.cross_entropy_from_logits(pred, labels, reduce="sum"))
        else:
            targets = np.array([p.values[name] for p in matched_prims])
            diff = ops.sub(pred, Tensor(targets))
            total = ops.add(total, ops.sum(ops.mul(diff, diff)))
    return ops.mul(total, Tensor(1.0 / b))


# -- bounding-box averaging baseline ----------------------------------------------


def box_cell_indices(bbox: tuple[float, ...], grid_size: int) -> np.ndarray:
    """Flat indices of grid cells whose centers fall inside a normalized box.

    An empty box falls back to the cell nearest its center.
    """
    x0, y0, x1, y1 = bbox
    centers = (np.arange(grid_size) + 0.5) / grid_size
    cols = np.nonzero((centers >= x0) & (centers <= x1))[0]
    rows = np.nonzero((centers >= y0) & (centers <= y1))[0]
    if cols.size == 0 or rows.size == 0:
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        col = int(np.clip(np.abs(centers - cx).argmin(), 0, grid_size - 1))
        row = int(np.clip(np.abs(centers - cy).argmin(), 0, grid_size - 1))
        return np.array([row * grid_size + col])
    return (rows[:, None] * grid_size + cols[None, :]).reshape(-1)


def bbox_avg_encode(features: Tensor, inst: SchemaInstance, grid_size: int) -> Tensor:
    """Region embeddings (N, c): mean feature inside each primitive's box."""
    rows: list[Tensor] = []
    for prim in inst.primitives:
        if "bbox" not in prim.values:
            raise ValueError("bbox averaging requires a bbox property on every primitive")
        cells = box_cell_indices(prim.values["bbox"], grid_size)
        region = features[cells, :]
        rows.append(ops.mean(region, axis=0, keepdims=True))
    return ops.concat(rows, axis=0)
