"""Minimum-cost bipartite assignment (Kuhn-Munkres, O(n^3)).

Rectangular problems are padded internally with zero-cost dummy rows or
columns, so a K x N matrix yields min(K, N) real matches. Ties between
equally cheap assignments are resolved to the lexicographically smallest
one (scanning rows in order, preferring the lowest feasible column),
which keeps downstream consumers deterministic.
"""

from __future__ import annotations

import numpy as np

_PAD_CHECK_TOL = 1e-9


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Optimal column-per-row for a square cost matrix via potentials."""
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row assigned to column j, 1-based
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        cols[match[j] - 1] = j - 1
    return cols


def _pad_square(cost: np.ndarray) -> np.ndarray:
    k, n = cost.shape
    side = max(k, n)
    padded = np.zeros((side, side))
    padded[:k, :n] = cost
    return padded


def _optimal_value(cost: np.ndarray) -> float:
    k, n = cost.shape
    if k == 0 or n == 0:
        return 0.0
    cols = _solve_square(_pad_square(cost))
    total = 0.0
    for i in range(k):
        if cols[i] < n:
            total += cost[i, cols[i]]
    return total


def hungarian(cost, refine: bool = True) -> tuple[list[int], float]:
    """Minimum-cost assignment of rows to columns.

    Returns (assignment, total) where assignment[i] is the column matched
    to row i, or -1 if row i is unmatched (more rows than columns). The
    total is the exact sum of the selected entries in row order.

    With ``refine=False`` the tie-resolution pass is skipped: the result
    is still optimal and deterministic for fixed input, but equal-cost
    assignments are not guaranteed to come out lexicographically first.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    k, n = cost.shape
    if k == 0 or n == 0:
        return [-1] * k, 0.0

    if not refine:
        cols = _solve_square(_pad_square(cost))
        assignment = [int(c) if c < n else -1 for c in cols[:k]]
        total = 0.0
        for i, j in enumerate(assignment):
            if j >= 0:
                total += cost[i, j]
        return assignment, total

    best = _optimal_value(cost)
    tol = _PAD_CHECK_TOL * max(1.0, abs(best))

    # Fix rows one at a time to the smallest column that still permits an
    # optimal completion; this pins down the lexicographically smallest
    # optimal assignment.
    assignment: list[int] = []
    free_cols = list(range(n))
    remaining_rows = list(range(k))
    prefix = 0.0
    for i in range(k):
        remaining_rows = remaining_rows[1:]
        sub_rows = np.array(remaining_rows, dtype=np.int64)
        chosen = -1
        may_skip = k > n  # unmatched rows exist only when rows outnumber columns
        candidates: list[int] = list(free_cols)
        for j in candidates:
            rest = [c for c in free_cols if c != j]
            sub = cost[np.ix_(sub_rows, np.array(rest, dtype=np.int64))] if sub_rows.size and rest else np.zeros((sub_rows.size, 0))
            completion = prefix + cost[i, j] + _optimal_value(sub)
            if completion <= best + tol:
                chosen = j
                break
        if chosen == -1 and may_skip:
            chosen = -1  # row stays unmatched
        elif chosen == -1:
            raise RuntimeError("assignment refinement failed to reach the optimal value")
        assignment.append(chosen)
        if chosen >= 0:
            prefix += cost[i, chosen]
            free_cols.remove(chosen)

    total = 0.0
    for i, j in enumerate(assignment):
        if j >= 0:
            total += cost[i, j]
    return assignment, total
