"""Input validation helpers shared by the estimator API."""

from __future__ import annotations

import numpy as np

from .schema import PropertySpace, SchemaInstance, parse_schema, validate_instance


def check_features(X, grid_cells: int | None = None, feature_dim: int | None = None) -> np.ndarray:
    """Coerce scene features to a finite float64 (n, L, c) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"scene features must be (n, L, c), got shape {X.shape}")
    if grid_cells is not None and X.shape[1] != grid_cells:
        raise ValueError(f"expected {grid_cells} grid cells, got {X.shape[1]}")
    if feature_dim is not None and X.shape[2] != feature_dim:
        raise ValueError(f"expected feature width {feature_dim}, got {X.shape[2]}")
    if not np.isfinite(X).all():
        raise ValueError("scene features contain non-finite values")
    return X


def check_schemas(y, space: PropertySpace) -> list[SchemaInstance]:
    """Coerce schema text or instances to validated SchemaInstance objects."""
    out: list[SchemaInstance] = []
    for i, item in enumerate(y):
        if isinstance(item, str):
            inst = parse_schema(item, space)
        elif isinstance(item, SchemaInstance):
            validate_instance(item, space)
            inst = item
        else:
            raise TypeError(f"schema {i} must be text or SchemaInstance, got {type(item)!r}")
        if len(inst) == 0:
            raise ValueError(f"schema {i} has no primitives; empty schemas cannot be grounded")
        out.append(inst)
    return out


def check_square_grid(grid_cells: int) -> int:
    side = int(round(np.sqrt(grid_cells)))
    if side * side != grid_cells:
        raise ValueError(f"grid with {grid_cells} cells is not square")
    return side
