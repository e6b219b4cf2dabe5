"""Minimum-cost bipartite assignment of ground-truth instances to queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class MatchResult:
    assignment: dict[int, int]  # gt index -> query index
    total_cost: float

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        gt = np.array(sorted(self.assignment), dtype=np.int64)
        return gt, np.array([self.assignment[g] for g in gt], dtype=np.int64)


def _solve(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method for ``n <= m``; returns column per row."""
    n, m = cost.shape
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def _total(cost: np.ndarray, cols: np.ndarray) -> float:
    return float(cost[np.arange(len(cols)), cols].sum())


def hungarian_match(cost, tie_break: bool = True, rtol: float = 1e-12) -> MatchResult:
    """Optimal injective assignment of rows (ground truth) to columns (queries).

    Among optimal assignments the one whose query sequence, read in
    ground-truth order, is lexicographically smallest is returned; ``rtol``
    decides what counts as a tie.
    """
    cost = np.asarray(cost.data if hasattr(cost, "data") else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise ContractError(f"{n} ground-truth instances cannot be matched to {m} queries")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    cols = _solve(cost)
    best = _total(cost, cols)
    if tie_break and n:
        tol = rtol * max(1.0, float(np.abs(cost).max()) * n)
        fixed: list[int] = []
        for i in range(n):
            for j in range(m):
                if j in fixed:
                    continue
                if j == cols[i]:
                    fixed.append(j)
                    break
                rest_rows = np.arange(i + 1, n)
                rest_cols = np.array([c for c in range(m) if c not in fixed and c != j], dtype=np.int64)
                sub = cost[np.ix_(rest_rows, rest_cols)]
                sub_cols = _solve(sub)
                head = float(cost[np.arange(i), fixed].sum()) if fixed else 0.0
                total = head + cost[i, j] + _total(sub, sub_cols)
                if total <= best + tol:
                    cols = np.concatenate([np.array(fixed + [j], dtype=np.int64), rest_cols[sub_cols]])
                    fixed.append(j)
                    break
        best = _total(cost, cols)
    return MatchResult({int(i): int(c) for i, c in enumerate(cols)}, best)
