"""Minimum-cost bipartite assignment (Kuhn-Munkres with shortest augmenting paths)."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from querystream.errors import ContractError


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (prediction index, ground-truth index)
    total_cost: float

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def hungarian_match(cost) -> MatchResult:
    """Optimal one-to-one assignment covering ``min(n_pred, n_gt)`` pairs.

    O(n^2 m) potentials-based algorithm; the inner relaxation over columns is
    vectorised.  Pairs come back sorted by prediction index.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {c.shape}")
    if c.size == 0:
        return MatchResult([], 0.0)
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix has non-finite entries")
    transposed = c.shape[0] > c.shape[1]
    a = c.T if transposed else c
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # row (1-based) owning column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = []
    for j in range(1, m + 1):
        if owner[j]:
            r, col = owner[j] - 1, j - 1
            pairs.append((col, r) if transposed else (r, col))
    pairs.sort()
    total = float(sum(c[p, g] for p, g in pairs))
    return MatchResult(pairs, total)


def brute_force_match(cost) -> MatchResult:
    """Exhaustive minimum over all injective assignments (small inputs only)."""
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return MatchResult([], 0.0)
    n, m = c.shape
    best, best_pairs = np.inf, []
    if n <= m:
        for cols in permutations(range(m), n):
            s = sum(c[i, j] for i, j in enumerate(cols))
            if s < best:
                best, best_pairs = s, list(enumerate(cols))
    else:
        for rows in permutations(range(n), m):
            s = sum(c[i, j] for j, i in enumerate(rows))
            if s < best:
                best, best_pairs = s, sorted((i, j) for j, i in enumerate(rows))
    return MatchResult(best_pairs, float(best))
