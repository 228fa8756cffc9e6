"""Procedural desk-scale scenes: feature grids with paired annotations.

Each scene is a G x G grid of feature vectors. Objects are non-overlapping
axis-aligned footprints; every covered cell receives a fixed appearance
embedding determined by the object's (shape, color, size) triple on top of
a shared background vector, plus Gaussian noise. The paired schema holds
one primitive per object (shape, color, size, center position, bounding
box in normalized [0, 1] image coordinates, boxes as x0,y0,x1,y1), and the
mask set records the footprints plus background as a partition of the
grid.

Appearance embeddings are resampled until all pairwise distances (and the
distance to the background vector) exceed 4 sigma, so grounding stays
information-theoretically possible at any configured noise level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, ScenePair, save_corpus
from .ndtensor import Rng
from .schema import (
    ContinuousProperty,
    DiscreteProperty,
    Primitive,
    PropertySpace,
    SchemaInstance,
)

DEFAULT_SHAPES = ("cube", "sphere", "cylinder")
DEFAULT_COLORS = ("red", "green", "blue", "yellow", "gray", "purple")
DEFAULT_SIZES = ("small", "large")

# Footprint edge length in cells per size symbol. Objects need enough
# area relative to the grid for reconstruction to care about them.
_SIZE_EXTENT = {"small": 2, "large": 3}


@dataclass
class SynthConfig:
    num_train: int = 512
    num_val: int = 64
    num_test: int = 128
    grid_size: int = 8
    feature_dim: int = 24
    min_objects: int = 1
    max_objects: int = 4
    shapes: tuple[str, ...] = DEFAULT_SHAPES
    colors: tuple[str, ...] = DEFAULT_COLORS
    sizes: tuple[str, ...] = DEFAULT_SIZES
    noise_sigma: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("objects-per-scene range must satisfy 1 <= min <= max")
        for s in self.sizes:
            if s not in _SIZE_EXTENT:
                raise ValueError(f"size symbol {s!r} has no footprint extent")

    @property
    def num_scenes(self) -> int:
        return self.num_train + self.num_val + self.num_test


def property_space(config: SynthConfig) -> PropertySpace:
    return PropertySpace(
        [
            DiscreteProperty("shape", tuple(config.shapes)),
            DiscreteProperty("color", tuple(config.colors)),
            DiscreteProperty("size", tuple(config.sizes)),
            ContinuousProperty("pos", 2, "normalized center (x, y)"),
            ContinuousProperty("bbox", 4, "normalized (x0, y0, x1, y1)"),
        ]
    )


def appearance_table(config: SynthConfig) -> tuple[dict[tuple[str, str, str], np.ndarray], np.ndarray]:
    """Unit-norm appearance embedding per (shape, color, size), plus background.

    All pairwise L2 distances exceed 4 * noise_sigma.
    """
    margin = 4.0 * config.noise_sigma
    triples = [(sh, co, si) for sh in config.shapes for co in config.colors for si in config.sizes]
    for attempt in range(64):
        rng = Rng(config.seed).derive("appearance", attempt)
        vectors = rng.normal((len(triples) + 1, config.feature_dim))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        gaps = np.linalg.norm(vectors[:, None, :] - vectors[None, :, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() > margin:
            background = vectors[-1]
            table = {t: vectors[i] for i, t in enumerate(triples)}
            return table, background
    raise RuntimeError(
        f"could not separate {len(triples)} appearance embeddings by {margin} in "
        f"{config.feature_dim} dimensions; lower noise_sigma or raise feature_dim"
    )


def _place_objects(rng: Rng, config: SynthConfig) -> list[tuple[int, int, int]]:
    """Sample non-overlapping footprints (row, col, extent); may shorten the
    requested count when placement keeps colliding."""
    g = config.grid_size
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    placed: list[tuple[int, int, int]] = []
    occupied = np.zeros((g, g), dtype=bool)
    sizes = [config.sizes[int(i)] for i in rng.integers(0, len(config.sizes), (count,))]
    for size_symbol in sizes:
        extent = _SIZE_EXTENT[size_symbol]
        for _ in range(100):
            r = int(rng.integers(0, g - extent + 1))
            c = int(rng.integers(0, g - extent + 1))
            if not occupied[r : r + extent, c : c + extent].any():
                occupied[r : r + extent, c : c + extent] = True
                placed.append((r, c, extent))
                break
        else:
            break  # resample the count: settle for what fits
    return placed


def _round2(x: float) -> float:
    return float(f"{x:.2f}")


def generate_scene(
    config: SynthConfig,
    scene_index: int,
    table: dict[tuple[str, str, str], np.ndarray],
    background: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, SchemaInstance]:
    """One scene: (features (L, c), masks (n_objects + 1, L), schema)."""
    g = config.grid_size
    rng = Rng(config.seed).derive("scene", scene_index)
    footprints = _place_objects(rng, config)

    features = np.tile(background, (g * g, 1))
    masks = np.zeros((len(footprints) + 1, g * g), dtype=np.uint8)
    primitives: list[Primitive] = []
    for obj_idx, (r, c, extent) in enumerate(footprints):
        shape = config.shapes[int(rng.integers(0, len(config.shapes)))]
        color = config.colors[int(rng.integers(0, len(config.colors)))]
        size = {v: k for k, v in _SIZE_EXTENT.items()}[extent]
        cells = [(rr * g + cc) for rr in range(r, r + extent) for cc in range(c, c + extent)]
        features[cells] += table[(shape, color, size)]
        masks[obj_idx, cells] = 1
        x0, y0 = c / g, r / g
        x1, y1 = (c + extent) / g, (r + extent) / g
        primitives.append(
            Primitive(
                index=obj_idx,
                values={
                    "shape": shape,
                    "color": color,
                    "size": size,
                    "pos": (_round2((x0 + x1) / 2), _round2((y0 + y1) / 2)),
                    "bbox": (_round2(x0), _round2(y0), _round2(x1), _round2(y1)),
                },
            )
        )
    masks[-1] = 1 - masks[:-1].any(axis=0)
    if config.noise_sigma > 0:
        features = features + rng.normal(features.shape, scale=config.noise_sigma)
    return features, masks, SchemaInstance(primitives)


def generate(config: SynthConfig, out_dir) -> Corpus:
    """Generate the full corpus and write it (with features/masks) to disk."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    table, background = appearance_table(config)
    space = property_space(config)

    splits = ["train"] * config.num_train + ["val"] * config.num_val + ["test"] * config.num_test
    pairs: list[ScenePair] = []
    for i, split in enumerate(splits):
        scene_id = f"scene_{i:06d}"
        features, masks, schema = generate_scene(config, i, table, background)
        feat_rel = f"features/{scene_id}.npy"
        mask_rel = f"masks/{scene_id}.npy"
        np.save(out_dir / feat_rel, features)
        np.save(out_dir / mask_rel, masks)
        pairs.append(ScenePair(scene_id, split, schema, feat_rel, mask_rel))

    corpus = Corpus(space=space, pairs=pairs, root=out_dir)
    save_corpus(corpus, out_dir)
    return corpus


def annotation_fraction(corpus: Corpus, fraction: float, seed: int = 0) -> Corpus:
    """Keep a deterministic subsample of train pairs; val/test untouched.

    Subsamples nest: the 10% subset is contained in the 50% subset for the
    same seed, so fraction sweeps compare nested training sets.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return corpus
    train = corpus.split("train")
    keep_count = int(fraction * len(train))
    if keep_count == 0:
        raise ValueError(f"fraction {fraction} keeps zero of {len(train)} train pairs")
    order = Rng(seed).derive("annotation-fraction").permutation(len(train))
    keep_ids = {train[i].scene_id for i in order[:keep_count]}
    pairs = [p for p in corpus.pairs if p.split != "train" or p.scene_id in keep_ids]
    return Corpus(space=corpus.space, pairs=pairs, root=corpus.root)
