"""Deterministic training: Adam with linear warmup, gradient clipping,
checkpointing, and the three training modes (grounding, bijective
matching, box averaging).

Every random draw is keyed by (seed, purpose, step), never by call
order, so training resumed from a checkpoint is bit-identical to an
uninterrupted run.
"""

from __future__ import annotations

import logging
from dataclasses import asdict

import numpy as np

from . import encoders as enc
from .config import RunConfig
from .corpus import Corpus
from .grounding import (
    box_cell_indices,
    contrastive_loss,
    hmc_training_loss,
    infonce_bound,
    init_property_predictor,
    score_matrix,
    total_loss,
)
from .ndtensor import Rng, Tensor, backward
from .ndtensor import tensor as ops
from .params import ParamStore, load_checkpoint, save_checkpoint
from .synth import annotation_fraction

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "lr", "loss", "contrastive", "recon", "bound", "grad_norm", "val_bound", "val_recall1")


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite training loss ({value}) at step {step}")


def warmup_lr(step: int, peak: float, warmup_steps: int) -> float:
    """Linear ramp to the peak rate, constant afterwards; zero at step 0."""
    return peak * min(1.0, step / warmup_steps)


def clip_gradient_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm cap; returns the raw norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class Adam:
    """Standard Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: dict[str, np.ndarray], lr: float, t: int) -> None:
        """Apply one update; `t` is the 1-based update count."""
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**t)
            v_hat = self.v[name] / (1 - self.beta2**t)
            params[name].value = params[name].value - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def dims_from_config(config: RunConfig, feature_dim: int, grid_cells: int) -> enc.ModelDims:
    return enc.ModelDims(
        num_slots=config.num_slots,
        slot_dim=config.slot_dim,
        feature_dim=feature_dim,
        grid_cells=grid_cells,
        proj_dim=config.proj_dim,
        prop_embed_dim=config.prop_embed_dim,
        schema_layers=config.schema_layers,
        schema_heads=config.schema_heads,
        sa_iters=config.sa_iters,
        decoder_hidden=config.decoder_hidden,
        head_hidden=config.head_hidden,
        fusion_hidden=config.fusion_hidden,
        max_schema_len=config.max_schema_len,
        use_schema_pos=config.use_schema_pos,
    )


def init_mode_params(mode: str, rng: Rng, dims: enc.ModelDims, space) -> ParamStore:
    if mode == "nsi":
        return enc.init_alignment_model(rng, dims, space)
    if mode == "hmc":
        store = ParamStore()
        enc.init_slot_attention(store, rng.derive("sa"), dims)
        enc.init_decoder(store, rng.derive("dec"), dims)
        init_property_predictor(store, rng.derive("pred"), dims.slot_dim, space, hidden=dims.head_hidden)
        return store
    if mode == "bbox":
        store = ParamStore()
        enc.init_primitive_encoder(store, rng.derive("prim"), dims, space)
        enc.init_schema_transformer(store, rng.derive("tsch"), dims)
        enc.init_projection_head(store, rng.derive("proj_scene"), dims, "proj_scene", dims.feature_dim)
        enc.init_projection_head(store, rng.derive("proj_schema"), dims, "proj_schema", dims.slot_dim)
        return store
    raise ValueError(f"unknown mode {mode!r}")


def region_membership(instances, grid_size: int, pad_to: int) -> np.ndarray:
    """(B, pad_to, L) row-averaging matrices for ground-truth boxes."""
    b = len(instances)
    out = np.zeros((b, pad_to, grid_size * grid_size))
    for i, inst in enumerate(instances):
        for j, prim in enumerate(inst.primitives):
            cells = box_cell_indices(prim.values["bbox"], grid_size)
            out[i, j, cells] = 1.0 / len(cells)
    return out


class Trainer:
    """One training run over a corpus; owns parameters and optimizer state."""

    def __init__(self, config: RunConfig, corpus: Corpus):
        config.validate()
        self.config = config
        self.space = corpus.space
        working = annotation_fraction(corpus, config.annotation_fraction, seed=config.seed)
        self.train_pairs = working.split("train")
        self.val_pairs = working.split("val")
        if not self.train_pairs:
            raise ValueError("corpus has no train pairs")

        feats0 = corpus.features(self.train_pairs[0])
        self.grid_cells, self.feature_dim = feats0.shape
        self.grid_size = int(round(np.sqrt(self.grid_cells)))
        self.dims = dims_from_config(config, self.feature_dim, self.grid_cells)

        self.train_features = np.stack([corpus.features(p) for p in self.train_pairs])
        self.train_schemas = [p.schema for p in self.train_pairs]
        self.val_features = (
            np.stack([corpus.features(p) for p in self.val_pairs]) if self.val_pairs else None
        )
        self.val_schemas = [p.schema for p in self.val_pairs]

        self.rng = Rng(config.seed)
        self.params = init_mode_params(config.mode, self.rng.derive("init"), self.dims, self.space)
        self.adam = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.step_count = 0
        self.history: list[dict] = []

    # -- batching ---------------------------------------------------------

    def _batch_indices(self, step: int) -> np.ndarray:
        n = len(self.train_pairs)
        batch = min(self.config.batch_size, n)
        per_epoch = (n + batch - 1) // batch
        epoch, pos = divmod(step, per_epoch)
        order = self.rng.derive("epoch", epoch).permutation(n)
        return order[pos * batch : (pos + 1) * batch]

    # -- loss construction --------------------------------------------------

    def _drop_plan(self, step: int) -> enc.DropoutPlan | None:
        if self.config.dropout <= 0:
            return None
        return enc.DropoutPlan(self.config.dropout, self.rng.derive("dropout", step))

    def _nsi_loss(self, feats: Tensor, insts, step: int, training: bool):
        cfg = self.config
        drop = self._drop_plan(step) if training else None
        init = enc.sample_initial_slots(
            self.params, self.rng.derive("slots", step), feats.shape[0], self.dims
        )
        slots, _ = enc.slot_attention(self.params, feats, self.dims, init)
        recon, _ = enc.decode_slots(self.params, slots, self.dims)
        l_recon = enc.reconstruction_loss(recon, feats)
        z, mask = enc.encode_schemas(self.params, insts, self.space, self.dims, drop)
        y_scene = enc.projection_head(self.params, "proj_scene", slots, drop)
        y_schema = enc.projection_head(self.params, "proj_schema", z, drop)
        scores = score_matrix(y_scene, y_schema, mask)
        l_contr, l_schema, l_scene = contrastive_loss(scores, cfg.temperature)
        loss = total_loss(l_contr, l_recon, cfg.beta_contrastive, cfg.beta_recon)
        row = {
            "contrastive": l_contr.item(),
            "recon": l_recon.item(),
            "bound": infonce_bound(l_contr.item(), feats.shape[0]),
        }
        return loss, row

    def _hmc_loss(self, feats: Tensor, insts, step: int, training: bool):
        cfg = self.config
        init = enc.sample_initial_slots(
            self.params, self.rng.derive("slots", step), feats.shape[0], self.dims
        )
        slots, _ = enc.slot_attention(self.params, feats, self.dims, init)
        recon, _ = enc.decode_slots(self.params, slots, self.dims)
        l_recon = enc.reconstruction_loss(recon, feats)
        l_match = hmc_training_loss(self.params, slots, insts, self.space)
        loss = total_loss(l_match, l_recon, cfg.beta_contrastive, cfg.beta_recon)
        row = {"contrastive": l_match.item(), "recon": l_recon.item(), "bound": float("nan")}
        return loss, row

    def _bbox_loss(self, feats: Tensor, insts, step: int, training: bool):
        cfg = self.config
        drop = self._drop_plan(step) if training else None
        z, mask = enc.encode_schemas(self.params, insts, self.space, self.dims, drop)
        membership = region_membership(insts, self.grid_size, mask.shape[1])
        regions = ops.matmul(Tensor(membership), feats)  # (B, N_max, c)
        y_scene = enc.projection_head(self.params, "proj_scene", regions, drop)
        y_schema = enc.projection_head(self.params, "proj_schema", z, drop)
        scores = score_matrix(y_scene, y_schema, mask, scene_mask=mask)
        l_contr, l_schema, l_scene = contrastive_loss(scores, cfg.temperature)
        loss = total_loss(l_contr, Tensor(0.0), cfg.beta_contrastive, 0.0)
        row = {
            "contrastive": l_contr.item(),
            "recon": float("nan"),
            "bound": infonce_bound(l_contr.item(), feats.shape[0]),
        }
        return loss, row

    def batch_loss(self, indices: np.ndarray, step: int, training: bool = True):
        feats = Tensor(self.train_features[indices])
        insts = [self.train_schemas[i] for i in indices]
        builder = {"nsi": self._nsi_loss, "hmc": self._hmc_loss, "bbox": self._bbox_loss}[self.config.mode]
        return builder(feats, insts, step, training)

    # -- validation ----------------------------------------------------------

    def validation_metrics(self) -> dict[str, float]:
        """Contrastive bound and top-1 retrieval rate on the val split."""
        if not self.val_pairs:
            return {"val_bound": float("nan"), "val_recall1": float("nan")}
        from .evaluation import embed_pairs, pair_score_matrix

        scene_items, schema_items = embed_pairs(
            self.params,
            self.dims,
            self.space,
            self.config.mode,
            self.val_features,
            self.val_schemas,
            [p.scene_id for p in self.val_pairs],
            self.grid_size,
            seed=self.config.seed,
        )
        scores = pair_score_matrix(scene_items, schema_items, self.config.mode, self.space)
        n = scores.shape[0]
        if self.config.mode == "hmc":
            val_bound = float("nan")
        else:
            l_contr, _, _ = contrastive_loss(Tensor(scores), self.config.temperature)
            val_bound = infonce_bound(l_contr.item(), n)
        ranks = (scores >= scores[np.arange(n), np.arange(n)][:, None]).sum(axis=1)
        recall1 = float((ranks <= 1).mean())
        return {"val_bound": val_bound, "val_recall1": recall1}

    # -- main loop -------------------------------------------------------------

    def run(self, steps: int | None = None) -> list[dict]:
        cfg = self.config
        target = cfg.steps if steps is None else self.step_count + steps
        while self.step_count < target:
            step = self.step_count
            indices = self._batch_indices(step)
            loss, row = self.batch_loss(indices, step, training=True)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(step, value)

            self.params.zero_grads()
            backward(loss)
            grads = {name: self.params[name].grad for name in self.params.names()}
            raw_norm = clip_gradient_norm(grads, cfg.grad_clip)
            lr = warmup_lr(step, cfg.peak_lr, cfg.warmup_steps)
            self.adam.step(self.params, grads, lr, step + 1)

            row.update(step=step, lr=lr, loss=value, grad_norm=raw_norm)
            if cfg.eval_every > 0 and (step % cfg.eval_every == 0 or step == target - 1):
                row.update(self.validation_metrics())
            else:
                row.update(val_bound=float("nan"), val_recall1=float("nan"))
            self.history.append(row)
            self.step_count += 1
            if step % 200 == 0:
                logger.info(
                    "step %d loss %.4f contrastive %.4f recon %s",
                    step,
                    value,
                    row["contrastive"],
                    row["recon"],
                )
        return self.history

    # -- checkpointing ------------------------------------------------------------

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param.{k}": v for k, v in self.params.arrays().items()}
        arrays.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        for col in HISTORY_COLUMNS:
            arrays[f"hist.{col}"] = np.array([row[col] for row in self.history], dtype=np.float64)
        return arrays

    def save(self, path) -> None:
        meta = {
            "kind": f"{self.config.mode}-trainer",
            "step": self.step_count,
            "config": asdict(self.config),
            "rng": self.rng.state(),
            "feature_dim": self.feature_dim,
            "grid_cells": self.grid_cells,
        }
        save_checkpoint(path, self.checkpoint_arrays(), meta)

    @classmethod
    def restore(cls, path, corpus: Corpus) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        config = RunConfig(**meta["config"])
        trainer = cls(config, corpus)
        trainer.step_count = meta["step"]
        trainer.params.load_arrays(
            {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
        )
        trainer.adam.m = {k[len("adam.m.") :]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        trainer.adam.v = {k[len("adam.v.") :]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}
        hist_cols = {c: arrays[f"hist.{c}"] for c in HISTORY_COLUMNS if f"hist.{c}" in arrays}
        length = len(next(iter(hist_cols.values()))) if hist_cols else 0
        trainer.history = [
            {c: (int(v[i]) if c == "step" else float(v[i])) for c, v in hist_cols.items()}
            for i in range(length)
        ]
        return trainer


def write_history_csv(path, history: list[dict]) -> None:
    """Training curve as CSV (step plus loss/bound columns)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([_format_cell(row[c], c) for c in HISTORY_COLUMNS])


def _format_cell(value, column: str) -> str:
    if column == "step":
        return str(int(value))
    return f"{float(value):.10g}"
