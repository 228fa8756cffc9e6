"""Per-slot schema generation: decode each slot into up to T primitives.

A stack of blocks alternates self-attention over T learned query tokens
with single-head cross-attention onto the one context slot (queries from
the tokens, key/value from the slot, so with a single key the attention
weights are exactly 1). Property heads read the final tokens; the
category head carries an extra no-object class, and a prediction's
confidence is one minus its no-object probability.

Training aligns the T predictions of each slot with the primitives the
frozen alignment model assigned to that slot (padded with no-object
targets), via minimum-cost matching on the same per-primitive loss that
is then optimized: cross-entropy for discrete properties, squared error
for continuous ones, plus an IoU term (1 - IoU) for boxes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict, field

import numpy as np

from . import encoders as enc
from .corpus import Corpus
from .grounding import score_pair
from .matching import hungarian
from .ndtensor import Rng, Tensor, backward, layernorm, linear, multi_head_attention
from .ndtensor import tensor as ops
from .params import ParamStore, glorot, load_checkpoint, save_checkpoint
from .schema import ContinuousProperty, DiscreteProperty, PropertySpace, SchemaInstance

logger = logging.getLogger(__name__)


@dataclass
class GeneratorConfig:
    queries_per_slot: int = 5  # T
    layers: int = 2
    heads: int = 2
    category_property: str = "shape"
    batch_size: int = 32
    steps: int = 1500
    peak_lr: float = 4e-4
    warmup_steps: int = 200
    grad_clip: float = 1.0
    seed: int = 0
    top_m: int = 10
    nms_iou: float = 0.75


@dataclass
class Detection:
    scene_id: str
    category: str
    bbox: tuple[float, float, float, float]
    confidence: float
    slot: int

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "category": self.category,
            "bbox": [round(float(v), 6) for v in self.bbox],
            "confidence": round(float(self.confidence), 6),
            "slot": self.slot,
        }


def box_iou(a, b) -> float:
    """IoU of two (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0) + max(0.0, bx1 - bx0) * max(0.0, by1 - by0) - inter
    return inter / union if union > 0 else 0.0


# -- model ------------------------------------------------------------------------


def init_generator(rng: Rng, config: GeneratorConfig, slot_dim: int, space: PropertySpace) -> ParamStore:
    if config.category_property not in space:
        raise ValueError(f"category property {config.category_property!r} not in space")
    if not isinstance(space[config.category_property], DiscreteProperty):
        raise ValueError("category property must be discrete")
    d = slot_dim
    store = ParamStore()
    store.add("set.queries", rng.normal((config.queries_per_slot, d), scale=0.5))
    for layer in range(config.layers):
        prefix = f"set.l{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{prefix}.attn.{name}", glorot(rng, d, d))
        for name in ("bq", "bk", "bv", "bo"):
            store.add(f"{prefix}.attn.{name}", np.zeros(d))
        store.add(f"{prefix}.norm1.gain", np.ones(d))
        store.add(f"{prefix}.norm1.bias", np.zeros(d))
        store.add(f"{prefix}.cross.wq", glorot(rng, d, d))
        store.add(f"{prefix}.cross.bq", np.zeros(d))
        store.add(f"{prefix}.cross.wkv", glorot(rng, d, 2 * d))
        store.add(f"{prefix}.cross.bkv", np.zeros(2 * d))
        store.add(f"{prefix}.norm2.gain", np.ones(d))
        store.add(f"{prefix}.norm2.bias", np.zeros(d))
    store.add("set.norm_out.gain", np.ones(d))
    store.add("set.norm_out.bias", np.zeros(d))
    for prop in space:
        if prop.name == config.category_property:
            width = len(prop.vocab) + 1  # closed vocabulary plus the no-object class
        elif isinstance(prop, DiscreteProperty):
            width = len(prop.vocab)
        else:
            width = prop.dim
        store.add(f"set.head.{prop.name}.w", glorot(rng, d, width))
        store.add(f"set.head.{prop.name}.b", np.zeros(width))
    return store


def set_decode(
    params: ParamStore, slots: Tensor, config: GeneratorConfig, space: PropertySpace
) -> dict[str, Tensor]:
    """Decode slots (..., d) into per-query property predictions.

    Returns one tensor per property, shaped (..., T, width); bbox-like
    continuous heads named "bbox" are squashed into [0, 1] by a sigmoid.
    Decoding is independent across slots (the only mixing is query
    self-attention within a slot).
    """
    t, d = params["set.queries"].shape
    lead = slots.shape[:-1]
    context = ops.reshape(slots, lead + (1, d))
    x = ops.add(params["set.queries"], Tensor(np.zeros(lead + (1, 1))))  # broadcast to (..., T, d)
    scale = 1.0 / np.sqrt(d)
    for layer in range(config.layers):
        prefix = f"set.l{layer}"
        normed = layernorm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
        x = ops.add(x, multi_head_attention(normed, normed, params, f"{prefix}.attn", config.heads))
        normed = layernorm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])
        q = linear(normed, params[f"{prefix}.cross.wq"], params[f"{prefix}.cross.bq"])
        kv = linear(context, params[f"{prefix}.cross.wkv"], params[f"{prefix}.cross.bkv"])
        keys = kv[..., :d]
        values = kv[..., d:]
        weights = ops.softmax(
            ops.mul(ops.matmul(q, ops.transpose(keys, tuple(range(keys.ndim - 2)) + (keys.ndim - 1, keys.ndim - 2))), Tensor(scale)),
            axis=-1,
        )
        x = ops.add(x, ops.matmul(weights, values))
    x = layernorm(x, params["set.norm_out.gain"], params["set.norm_out.bias"])

    outputs: dict[str, Tensor] = {}
    for prop in space:
        head = linear(x, params[f"set.head.{prop.name}.w"], params[f"set.head.{prop.name}.b"])
        if isinstance(prop, ContinuousProperty) and prop.name == "bbox":
            head = ops.sigmoid(head)
        outputs[prop.name] = head
    return outputs


# -- targets from the frozen alignment model ------------------------------------------


def slot_targets(
    inst: SchemaInstance, assignment, num_slots: int, queries_per_slot: int
) -> list[list[int]]:
    """Primitive indices grouped per slot, truncated to the query budget.

    When more primitives land on a slot than it has queries, the highest
    similarity ones are kept.
    """
    per_slot: list[list[tuple[float, int]]] = [[] for _ in range(num_slots)]
    for a in assignment:
        per_slot[a.slot].append((a.similarity, a.primitive))
    out: list[list[int]] = []
    for k, entries in enumerate(per_slot):
        entries.sort(key=lambda e: (-e[0], e[1]))
        if len(entries) > queries_per_slot:
            logger.warning(
                "slot %d has %d assigned primitives, keeping the %d most similar",
                k,
                len(entries),
                queries_per_slot,
            )
            entries = entries[:queries_per_slot]
        out.append(sorted(e[1] for e in entries))
    return out


def _property_loss_values(
    outputs_value: dict[str, np.ndarray],
    inst: SchemaInstance,
    space: PropertySpace,
    category_property: str,
    scene: int,
    slot: int,
    targets: list[int],
    queries_per_slot: int,
) -> np.ndarray:
    """(T, T) matching costs: prediction t against target j (padded)."""
    t = queries_per_slot
    cost = np.zeros((t, t))
    cat_prop = space[category_property]
    cat_logits = outputs_value[category_property][scene, slot]  # (T, n_cat + 1)
    shifted = cat_logits - cat_logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    phi = len(cat_prop.vocab)
    for j in range(t):
        if j < len(targets):
            prim = inst.primitives[targets[j]]
            cost[:, j] -= log_probs[:, cat_prop.vocab.index(prim.values[category_property])]
            for prop in space:
                if prop.name == category_property:
                    continue
                pred = outputs_value[prop.name][scene, slot]  # (T, width)
                if isinstance(prop, DiscreteProperty):
                    logits = pred - pred.max(axis=1, keepdims=True)
                    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
                    cost[:, j] -= lp[:, prop.vocab.index(prim.values[prop.name])]
                else:
                    target = np.asarray(prim.values[prop.name])
                    cost[:, j] += ((pred - target) ** 2).sum(axis=1)
                    if prop.name == "bbox":
                        for q in range(t):
                            cost[q, j] += 1.0 - box_iou(pred[q], target)
        else:
            cost[:, j] -= log_probs[:, phi]  # no-object target: confidence term only
    return cost


def gen_loss(
    params: ParamStore,
    outputs: dict[str, Tensor],
    instances: list[SchemaInstance],
    per_scene_targets: list[list[list[int]]],
    space: PropertySpace,
    config: GeneratorConfig,
) -> Tensor:
    """Matched set-prediction loss, averaged over all decoded slots.

    Real targets incur the category term plus every property loss;
    no-object targets incur only the category (confidence) term.
    """
    cat_prop = space[config.category_property]
    phi = len(cat_prop.vocab)
    t = config.queries_per_slot
    b = len(instances)
    num_slots = outputs[config.category_property].shape[1]
    outputs_value = {k: v.value for k, v in outputs.items()}

    cat_labels = np.full((b, num_slots, t), phi, dtype=np.int64)
    real_mask = np.zeros((b, num_slots, t))
    aligned: dict[str, np.ndarray] = {}
    for prop in space:
        if prop.name == config.category_property:
            continue
        if isinstance(prop, DiscreteProperty):
            aligned[prop.name] = np.zeros((b, num_slots, t), dtype=np.int64)
        else:
            aligned[prop.name] = np.zeros((b, num_slots, t, prop.dim))

    for i, inst in enumerate(instances):
        for k in range(num_slots):
            targets = per_scene_targets[i][k]
            cost = _property_loss_values(
                outputs_value, inst, space, config.category_property, i, k, targets, t
            )
            assignment, _ = hungarian(cost, refine=False)
            for q in range(t):
                j = assignment[q]
                if j is None or j < 0 or j >= len(targets):
                    continue  # matched to a no-object pad
                prim = inst.primitives[targets[j]]
                cat_labels[i, k, q] = cat_prop.vocab.index(prim.values[config.category_property])
                real_mask[i, k, q] = 1.0
                for prop in space:
                    if prop.name == config.category_property:
                        continue
                    if isinstance(prop, DiscreteProperty):
                        aligned[prop.name][i, k, q] = prop.vocab.index(prim.values[prop.name])
                    else:
                        aligned[prop.name][i, k, q] = prim.values[prop.name]

    total = ops.cross_entropy_from_logits(outputs[config.category_property], cat_labels, reduce="sum")
    mask_t = Tensor(real_mask)
    for prop in space:
        if prop.name == config.category_property:
            continue
        pred = outputs[prop.name]
        if isinstance(prop, DiscreteProperty):
            nll = ops.cross_entropy_from_logits(pred, aligned[prop.name], reduce="none")
            total = ops.add(total, ops.sum(ops.mul(nll, mask_t)))
        else:
            diff = ops.sub(pred, Tensor(aligned[prop.name]))
            sq = ops.sum(ops.mul(diff, diff), axis=-1)
            total = ops.add(total, ops.sum(ops.mul(sq, mask_t)))
            if prop.name == "bbox":
                iou = _iou_tensor(pred, Tensor(aligned[prop.name]))
                total = ops.add(total, ops.sum(ops.mul(ops.sub(Tensor(1.0), iou), mask_t)))
    return ops.mul(total, Tensor(1.0 / (b * num_slots)))


def _iou_tensor(pred: Tensor, target: Tensor) -> Tensor:
    """Differentiable IoU for (..., 4) xyxy boxes."""
    px0, py0, px1, py1 = (pred[..., i] for i in range(4))
    tx0, ty0, tx1, ty1 = (target[..., i] for i in range(4))
    iw = ops.relu(ops.sub(ops.minimum(px1, tx1), ops.maximum(px0, tx0)))
    ih = ops.relu(ops.sub(ops.minimum(py1, ty1), ops.maximum(py0, ty0)))
    inter = ops.mul(iw, ih)
    area_p = ops.mul(ops.relu(ops.sub(px1, px0)), ops.relu(ops.sub(py1, py0)))
    area_t = ops.mul(ops.relu(ops.sub(tx1, tx0)), ops.relu(ops.sub(ty1, ty0)))
    union = ops.add(ops.sub(ops.add(area_p, area_t), inter), Tensor(1e-9))
    return ops.div(inter, union)


# -- inference -----------------------------------------------------------------------


def decode_candidates(
    params: ParamStore,
    slots_value: np.ndarray,
    config: GeneratorConfig,
    space: PropertySpace,
    scene_id: str,
) -> list[Detection]:
    """All K*T raw detections for one scene's (K, d) slots."""
    outputs = set_decode(params, Tensor(slots_value), config, space)
    cat_prop = space[config.category_property]
    phi = len(cat_prop.vocab)
    logits = outputs[config.category_property].value  # (K, T, n_cat + 1)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    bbox = outputs["bbox"].value if "bbox" in outputs else None
    detections = []
    k, t = logits.shape[:2]
    for slot in range(k):
        for q in range(t):
            category = cat_prop.vocab[int(probs[slot, q, :phi].argmax())]
            box = tuple(float(v) for v in bbox[slot, q]) if bbox is not None else (0.0, 0.0, 0.0, 0.0)
            detections.append(
                Detection(
                    scene_id=scene_id,
                    category=category,
                    bbox=box,
                    confidence=float(1.0 - probs[slot, q, phi]),
                    slot=slot,
                )
            )
    return detections


def non_max_suppression(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-category suppression of overlapping boxes (IoU >= thr)."""
    kept: list[Detection] = []
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    for i in order:
        det = detections[i]
        if any(k.category == det.category and box_iou(k.bbox, det.bbox) >= iou_threshold for k in kept):
            continue
        kept.append(det)
    return kept


def detect(
    params: ParamStore,
    slots_value: np.ndarray,
    config: GeneratorConfig,
    space: PropertySpace,
    scene_id: str,
    top_m: int | None = None,
    nms_iou: float | None = None,
) -> list[Detection]:
    """Pool all slots' candidates, keep the top-M confident, then NMS."""
    top_m = config.top_m if top_m is None else top_m
    nms_iou = config.nms_iou if nms_iou is None else nms_iou
    if top_m <= 0:
        return []
    candidates = decode_candidates(params, slots_value, config, space, scene_id)
    candidates.sort(key=lambda d: -d.confidence)
    return non_max_suppression(candidates[:top_m], nms_iou)


# -- training against a frozen alignment model ------------------------------------------


class GeneratorTrainer:
    """Trains the set decoder on correspondences from a frozen aligner."""

    def __init__(
        self,
        config: GeneratorConfig,
        alignment_params: ParamStore,
        dims: enc.ModelDims,
        corpus: Corpus,
        split: str = "train",
    ):
        from .train import Adam, warmup_lr  # avoid a module cycle at import time

        self.config = config
        self.space = corpus.space
        self.dims = dims
        pairs = corpus.split(split)
        if not pairs:
            raise ValueError(f"corpus has no {split!r} pairs")
        features = np.stack([corpus.features(p) for p in pairs])
        self.scene_ids = [p.scene_id for p in pairs]
        self.schemas = [p.schema for p in pairs]

        # Frozen alignment forward: slots and primitive->slot assignments.
        from .evaluation import embed_pairs

        eps = np.stack(
            [
                Rng(config.seed).derive("eval-slots", sid).normal((dims.num_slots, dims.slot_dim))
                for sid in self.scene_ids
            ]
        )
        init = alignment_params["sa.mu"] + Tensor(np.exp(alignment_params["sa.log_sigma"].value)) * Tensor(eps)
        slots, _ = enc.slot_attention(alignment_params, Tensor(features), dims, init)
        self.slots = slots.value  # (n, K, d), constants from here on
        y_scene = enc.projection_head(alignment_params, "proj_scene", slots)
        z, _ = enc.encode_schemas(alignment_params, self.schemas, self.space, dims)
        y_schema = enc.projection_head(alignment_params, "proj_schema", z)
        self.targets: list[list[list[int]]] = []
        for i, inst in enumerate(self.schemas):
            _, assignment = score_pair(
                Tensor(y_scene.value[i]), Tensor(y_schema.value[i, : len(inst)])
            )
            self.targets.append(
                slot_targets(inst, assignment, dims.num_slots, config.queries_per_slot)
            )

        self.rng = Rng(config.seed)
        self.params = init_generator(self.rng.derive("init"), config, dims.slot_dim, self.space)
        self.adam = Adam()
        self._warmup_lr = warmup_lr
        self.step_count = 0
        self.history: list[dict] = []

    def run(self, steps: int | None = None) -> list[dict]:
        from .train import clip_gradient_norm

        cfg = self.config
        n = len(self.scene_ids)
        target = cfg.steps if steps is None else self.step_count + steps
        while self.step_count < target:
            step = self.step_count
            batch = min(cfg.batch_size, n)
            per_epoch = (n + batch - 1) // batch
            epoch, pos = divmod(step, per_epoch)
            order = self.rng.derive("epoch", epoch).permutation(n)
            idx = order[pos * batch : (pos + 1) * batch]

            outputs = set_decode(self.params, Tensor(self.slots[idx]), cfg, self.space)
            loss = gen_loss(
                self.params,
                outputs,
                [self.schemas[i] for i in idx],
                [self.targets[i] for i in idx],
                self.space,
                cfg,
            )
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(f"generator loss diverged at step {step}")
            self.params.zero_grads()
            backward(loss)
            grads = {name: self.params[name].grad for name in self.params.names()}
            norm = clip_gradient_norm(grads, cfg.grad_clip)
            lr = self._warmup_lr(step, cfg.peak_lr, cfg.warmup_steps)
            self.adam.step(self.params, grads, lr, step + 1)
            self.history.append({"step": step, "loss": value, "lr": lr, "grad_norm": norm})
            self.step_count += 1
            if step % 200 == 0:
                logger.info("generator step %d loss %.4f", step, value)
        return self.history

    def save(self, path) -> None:
        arrays = {f"param.{k}": v for k, v in self.params.arrays().items()}
        arrays.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        meta = {
            "kind": "generator",
            "step": self.step_count,
            "config": asdict(self.config),
            "slot_dim": self.dims.slot_dim,
        }
        save_checkpoint(path, arrays, meta)


def load_generator(path) -> tuple[ParamStore, GeneratorConfig]:
    arrays, meta = load_checkpoint(path)
    config = GeneratorConfig(**meta["config"])
    store = ParamStore()
    for key, value in arrays.items():
        if key.startswith("param."):
            store.add(key[len("param.") :], value)
    return store, config
