"""Evaluation protocols: bimodal retrieval, object discovery, detection
AP, and correspondence inspection.

Retrieval databases are built from a held-out split: index i pairs scene
i with schema i, scenes are ranked against schemas (and vice versa) by
the same compositional score the model trained on, and Recall@K is the
fraction of queries whose true partner ranks in the top K (ties broken
by index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import encoders as enc
from .grounding import hmc_baseline_score, predict_properties, score_matrix, score_pair
from .ndtensor import Rng, Tensor
from .params import ParamStore
from .schema import PropertySpace, SchemaInstance


@dataclass
class RetrievalDB:
    """Index-aligned scene and annotation embedding databases."""

    scene_items: list  # per scene: (K_i, p) projections, or (K, out) predictions for hmc
    schema_items: list  # per schema: (N_i, p) projections, or SchemaInstance for hmc
    mode: str
    space: PropertySpace | None = None

    def __post_init__(self):
        if len(self.scene_items) != len(self.schema_items):
            raise ValueError("scene and annotation databases must be index-aligned")

    def __len__(self) -> int:
        return len(self.scene_items)


def _stack_padded(items: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = items[0].shape[-1]
    longest = max(x.shape[0] for x in items)
    out = np.zeros((len(items), longest, width))
    mask = np.zeros((len(items), longest))
    for i, x in enumerate(items):
        out[i, : x.shape[0]] = x
        mask[i, : x.shape[0]] = 1.0
    return out, mask


def embed_pairs(
    params: ParamStore,
    dims: enc.ModelDims,
    space: PropertySpace,
    mode: str,
    features: np.ndarray,
    schemas: list[SchemaInstance],
    scene_ids: list[str],
    grid_size: int,
    seed: int = 0,
) -> tuple[list, list]:
    """Deterministic evaluation embeddings for index-aligned pairs.

    Slot-init noise is derived per scene id, so database entries do not
    depend on batch composition or evaluation order.
    """
    n = len(scene_ids)
    feats = Tensor(features)

    if mode in ("nsi", "hmc"):
        eps = np.stack(
            [Rng(seed).derive("eval-slots", sid).normal((dims.num_slots, dims.slot_dim)) for sid in scene_ids]
        )
        init = params["sa.mu"] + Tensor(np.exp(params["sa.log_sigma"].value)) * Tensor(eps)
        slots, _ = enc.slot_attention(params, feats, dims, init)
        if mode == "hmc":
            preds = predict_properties(params, slots)
            scene_items = [preds.value[i] for i in range(n)]
        else:
            y = enc.projection_head(params, "proj_scene", slots)
            scene_items = [y.value[i] for i in range(n)]
    elif mode == "bbox":
        from .train import region_membership

        longest = max(len(s) for s in schemas)
        membership = region_membership(schemas, grid_size, longest)
        regions = Tensor(membership) @ feats
        y = enc.projection_head(params, "proj_scene", regions)
        scene_items = [y.value[i, : len(schemas[i])] for i in range(n)]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    if mode == "hmc":
        schema_items: list = list(schemas)
    else:
        z, mask = enc.encode_schemas(params, schemas, space, dims)
        y_schema = enc.projection_head(params, "proj_schema", z)
        schema_items = [y_schema.value[i, : len(schemas[i])] for i in range(n)]
    return scene_items, schema_items


def pair_score_matrix(scene_items: list, schema_items: list, mode: str, space: PropertySpace) -> np.ndarray:
    """(n_scenes, n_schemas) score matrix under the mode's ranking rule."""
    if mode == "hmc":
        scores = np.zeros((len(scene_items), len(schema_items)))
        for x, preds in enumerate(scene_items):
            for y, inst in enumerate(schema_items):
                scores[x, y] = hmc_baseline_score(preds, inst, space)
        return scores
    scenes, scene_mask = _stack_padded(scene_items)
    schemas, schema_mask = _stack_padded(schema_items)
    full_scene_mask = None if scene_mask.all() else scene_mask
    return score_matrix(Tensor(scenes), Tensor(schemas), schema_mask, full_scene_mask).value


def build_retrieval_db(
    params: ParamStore,
    dims: enc.ModelDims,
    space: PropertySpace,
    mode: str,
    features: np.ndarray,
    schemas: list[SchemaInstance],
    scene_ids: list[str],
    grid_size: int,
    seed: int = 0,
) -> RetrievalDB:
    scene_items, schema_items = embed_pairs(
        params, dims, space, mode, features, schemas, scene_ids, grid_size, seed
    )
    return RetrievalDB(scene_items, schema_items, mode, space)


def retrieve(db: RetrievalDB, direction: str, k: int, scores: np.ndarray | None = None) -> float:
    """Recall@K for one query direction.

    direction: "scene->schema" ranks annotations per scene query;
    "schema->scene" ranks scenes per annotation query.
    """
    n = len(db)
    if n == 0:
        raise ValueError("empty retrieval database")
    if k > n:
        raise ValueError(f"recall@{k} undefined for database of size {n}")
    if scores is None:
        scores = pair_score_matrix(db.scene_items, db.schema_items, db.mode, db.space)
    if direction == "schema->scene":
        scores = scores.T
    elif direction != "scene->schema":
        raise ValueError(f"unknown direction {direction!r}")
    hits = 0
    for q in range(n):
        row = scores[q]
        true = row[q]
        rank = int((row > true).sum())
        rank += int((row[:q] == true).sum())  # ties broken by index
        if rank < k:
            hits += 1
    return hits / n


# -- object discovery ---------------------------------------------------------


def predicted_masks_from_attention(attention: np.ndarray, num_slots: int) -> np.ndarray:
    """(K, L) boolean masks from per-cell argmax over the attention map."""
    labels = attention.argmax(axis=1)
    return np.stack([labels == k for k in range(num_slots)])


def fg_ari(predicted_labels: np.ndarray, gt_masks: np.ndarray) -> float:
    """Adjusted Rand index over foreground cells only.

    `predicted_labels` is (L,) integer cluster ids; `gt_masks` is the
    (n_objects + 1, L) partition with background last. Scenes without
    foreground have no defined score and raise.
    """
    foreground = gt_masks[-1] == 0
    if not foreground.any():
        raise ValueError("scene has no foreground cells; FG-ARI is undefined")
    gt_labels = gt_masks[:-1].argmax(axis=0)[foreground]
    pred = np.asarray(predicted_labels)[foreground]
    return adjusted_rand_index(pred, gt_labels)


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """Plain ARI from the contingency table."""
    a_ids, a_inv = np.unique(a, return_inverse=True)
    b_ids, b_inv = np.unique(b, return_inverse=True)
    table = np.zeros((a_ids.size, b_ids.size), dtype=np.int64)
    np.add.at(table, (a_inv, b_inv), 1)
    n = a.size

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_rows * sum_cols / total if total > 0 else 0.0
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0 if sum_cells == expected else 0.0
    return float((sum_cells - expected) / (max_index - expected))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union > 0 else 0.0


def mbo(predicted_masks: np.ndarray, gt_masks: np.ndarray, level: str = "instance", classes: list[str] | None = None) -> float:
    """Mean best overlap between ground-truth object masks and predictions.

    Instance level scores each object mask; class level unions objects of
    the same class first (requires `classes`, one label per object).
    """
    objects = gt_masks[:-1].astype(bool)
    if objects.shape[0] == 0:
        raise ValueError("scene has no objects; mBO is undefined")
    if level == "instance":
        targets = [objects[i] for i in range(objects.shape[0])]
    elif level == "class":
        if classes is None or len(classes) != objects.shape[0]:
            raise ValueError("class-level mBO needs one class label per object")
        targets = [objects[[i for i, c in enumerate(classes) if c == cls]].any(axis=0) for cls in sorted(set(classes))]
    else:
        raise ValueError(f"unknown mBO level {level!r}")
    best = [max(mask_iou(t, predicted_masks[k]) for k in range(predicted_masks.shape[0])) for t in targets]
    return float(np.mean(best))


# -- detection -----------------------------------------------------------------


def average_precision(
    detections: list[dict],
    ground_truth: list[dict],
    iou_threshold: float,
) -> float:
    """Macro AP over categories at one IoU threshold.

    `detections`: {scene_id, category, bbox, confidence}; `ground_truth`:
    {scene_id, category, bbox}. Uses greedy confidence-ordered matching
    to unmatched ground truth and all-point interpolation of the PR
    curve. Categories absent from the ground truth are skipped.
    """
    from .generator import box_iou

    categories = sorted({g["category"] for g in ground_truth})
    if not categories:
        return 0.0
    aps = []
    for category in categories:
        dets = [d for d in detections if d["category"] == category]
        gts = [g for g in ground_truth if g["category"] == category]
        dets.sort(key=lambda d: -d["confidence"])
        matched: set[tuple[str, int]] = set()
        gt_by_scene: dict[str, list[tuple[int, dict]]] = {}
        for i, g in enumerate(gts):
            gt_by_scene.setdefault(g["scene_id"], []).append((i, g))
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for rank, det in enumerate(dets):
            best_iou, best_idx = 0.0, None
            for i, g in gt_by_scene.get(det["scene_id"], []):
                if (g["scene_id"], i) in matched:
                    continue
                overlap = box_iou(det["bbox"], g["bbox"])
                if overlap > best_iou:
                    best_iou, best_idx = overlap, i
            if best_idx is not None and best_iou >= iou_threshold:
                matched.add((det["scene_id"], best_idx))
                tp[rank] = 1
            else:
                fp[rank] = 1
        if len(dets) == 0:
            aps.append(0.0)
            continue
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recall = cum_tp / len(gts)
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        prev_r = 0.0
        ap = 0.0
        for r, p in zip(recall, envelope):
            ap += (r - prev_r) * p
            prev_r = r
        aps.append(float(ap))
    return float(np.mean(aps))


# -- correspondence export -------------------------------------------------------


def export_correspondences(
    params: ParamStore,
    dims: enc.ModelDims,
    space: PropertySpace,
    features: np.ndarray,
    schemas: list[SchemaInstance],
    scene_ids: list[str],
    path,
    seed: int = 0,
    grid_path=None,
    grid_size: int | None = None,
) -> None:
    """Write per-pair primitive->slot assignments plus slot cell lists.

    One JSON record per line: {scene_id, assignments: [[primitive, slot,
    similarity]], slot_cells: [[...], ...]}. With `grid_path`, also emits
    a plain-text visualization (one G x G character grid per scene, cells
    labeled by their argmax slot).
    """
    n = len(scene_ids)
    feats = Tensor(features)
    eps = np.stack(
        [Rng(seed).derive("eval-slots", sid).normal((dims.num_slots, dims.slot_dim)) for sid in scene_ids]
    )
    init = params["sa.mu"] + Tensor(np.exp(params["sa.log_sigma"].value)) * Tensor(eps)
    slots, attn = enc.slot_attention(params, feats, dims, init)
    y_scene = enc.projection_head(params, "proj_scene", slots)
    z, _ = enc.encode_schemas(params, schemas, space, dims)
    y_schema = enc.projection_head(params, "proj_schema", z)

    grid_lines: list[str] = []
    with open(path, "w") as fh:
        for i in range(n):
            score, assignment = score_pair(
                Tensor(y_scene.value[i]), Tensor(y_schema.value[i, : len(schemas[i])])
            )
            labels = attn.value[i].argmax(axis=1)
            slot_cells = [np.nonzero(labels == k)[0].tolist() for k in range(dims.num_slots)]
            record = {
                "scene_id": scene_ids[i],
                "score": round(float(score.value), 6),
                "assignments": [[a.primitive, a.slot, round(a.similarity, 6)] for a in assignment],
                "slot_cells": slot_cells,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            if grid_path is not None:
                g = grid_size or int(round(np.sqrt(labels.size)))
                grid_lines.append(f"# {scene_ids[i]}")
                for r in range(g):
                    grid_lines.append("".join(format(labels[r * g + c], "x") for c in range(g)))
                grid_lines.append(
                    "primitives: " + ", ".join(f"{a.primitive}->slot{a.slot}" for a in assignment)
                )
                grid_lines.append("")
    if grid_path is not None:
        with open(grid_path, "w") as fh:
            fh.write("\n".join(grid_lines))


# -- reports ----------------------------------------------------------------------


def write_report(path, metrics: dict) -> None:
    """key = value lines, sorted by key, deterministic formatting."""
    lines = []
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            rendered = f"{value:.6f}"
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
