"""Maximum-weight bipartite matching on complete bipartite graphs.

`km_max_weight` is an O(n^3) Kuhn-Munkres (Hungarian) solver that saturates
the smaller vertex side; `brute_force_matching` is the exhaustive oracle used
to verify it. Weights may be negative: they are shifted to non-negative for
the Hungarian procedure (a constant shift cannot change which fixed-size
matching is heaviest) and all reported totals come from the original weights.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Matching:
    """A set of (row, col) edges without shared vertices.

    `total_weight` is the sum of the edge weights and `confidence` the largest
    single edge weight.
    """

    edges: tuple[tuple[int, int], ...]
    total_weight: float
    confidence: float


def _validated(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError("weight matrix must be 2-D with at least one row and one column")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w


def _check_edges(edges, shape) -> None:
    rows, cols = shape
    for i, j in edges:
        if not (0 <= i < rows and 0 <= j < cols):
            raise ValueError(f"edge ({i}, {j}) is outside a {rows}x{cols} weight matrix")


def matching_weight(m: Matching, weights) -> float:
    """Sum of matrix entries over the matching's edges (0.0 for no edges)."""
    w = _validated(weights)
    _check_edges(m.edges, w.shape)
    return float(sum(float(w[i, j]) for i, j in m.edges))


def matching_confidence(m: Matching, weights) -> float:
    """Largest matrix entry over the matching's edges."""
    w = _validated(weights)
    if not m.edges:
        raise ValueError("confidence is undefined for an empty matching")
    _check_edges(m.edges, w.shape)
    return float(max(float(w[i, j]) for i, j in m.edges))


def _finish(edges: tuple[tuple[int, int], ...], w: np.ndarray) -> Matching:
    total = sum(float(w[i, j]) for i, j in edges)
    conf = max(float(w[i, j]) for i, j in edges)
    return Matching(edges=edges, total_weight=total, confidence=conf)


def _hungarian_min(cost: list[list[float]]) -> list[int]:
    """Shortest-augmenting-path assignment on a square cost matrix (minimize).

    Classic potential-based formulation: rows are inserted one at a time and
    an augmenting path of tight edges is grown by repeatedly relaxing column
    slacks. Returns the column assigned to each row. O(n^3).
    """
    n = len(cost)
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    row_of = [0] * (n + 1)  # row currently matched to each 1-indexed column; 0 = free
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            delta = INF
            j1 = 0
            crow = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = crow[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[row_of[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        # walk the augmenting path back, flipping matched columns
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of = [0] * n
    for j in range(1, n + 1):
        if row_of[j]:
            col_of[row_of[j] - 1] = j - 1
    return col_of


def km_max_weight(weights) -> Matching:
    """Maximum-total-weight matching saturating the smaller side of `weights`.

    Rectangular inputs are padded to square with dummy entries strictly below
    every (shifted) real weight; dummy edges are stripped from the result, so
    the returned matching always has min(rows, cols) edges. When several
    matchings share the maximum total, which one is returned is unspecified,
    except that a single-row or single-column problem resolves ties toward the
    lowest index.
    """
    w = _validated(weights)
    rows, cols = w.shape
    if rows == 1:
        j = int(np.argmax(w[0]))
        return _finish(((0, j),), w)
    if cols == 1:
        i = int(np.argmax(w[:, 0]))
        return _finish(((i, 0),), w)

    shifted = w - w.min()
    n = max(rows, cols)
    padded = np.full((n, n), -1.0, dtype=np.float64)
    padded[:rows, :cols] = shifted
    col_of = _hungarian_min((-padded).tolist())
    edges = tuple(sorted((i, col_of[i]) for i in range(rows) if col_of[i] < cols))
    return _finish(edges, w)


def brute_force_matching(weights) -> Matching:
    """Exhaustive maximum-weight matching over all injections of the smaller
    side into the larger side. Verification oracle for `km_max_weight`; the
    smaller side must have at most 9 vertices."""
    w = _validated(weights)
    rows, cols = w.shape
    if min(rows, cols) > 9:
        raise ValueError(
            f"instance too large for exhaustive enumeration: min side "
            f"{min(rows, cols)} > 9"
        )
    wl = w.tolist()
    best_total = -math.inf
    best_edges: tuple[tuple[int, int], ...] = ()
    if rows <= cols:
        for perm in itertools.permutations(range(cols), rows):
            total = 0.0
            for i in range(rows):
                total += wl[i][perm[i]]
            if total > best_total:
                best_total = total
                best_edges = tuple((i, perm[i]) for i in range(rows))
    else:
        for perm in itertools.permutations(range(rows), cols):
            total = 0.0
            for j in range(cols):
                total += wl[perm[j]][j]
            if total > best_total:
                best_total = total
                best_edges = tuple(sorted((perm[j], j) for j in range(cols)))
    return _finish(best_edges, w)
