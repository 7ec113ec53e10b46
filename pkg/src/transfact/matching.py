"""Injective segment-to-token assignment.

Each ground-truth segment is matched to exactly one stage token so that
the summed cost is minimal; leftover tokens form the unmatched set that
is supervised toward the null class. The cost of pairing segment n with
token m combines how confidently the token predicts the segment's label
and how much stage-to-frame attention the token spends on the segment's
frames (both from the final block, probabilities floored at 1e-12).

The solver is a Jonker-Volgenant shortest-augmenting-path LAP on the
rectangular matrix (jit-compiled when numba is available; the pure-Python
path computes identical values). Its dual potentials certify optimality
and let us canonicalize ties: every minimum-cost assignment uses only
edges of zero reduced cost, so among those we return the assignment whose
token indices are lexicographically smallest in segment order. Gradients
never flow through the assignment; it is recomputed from detached
outputs every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, InputError
from .videodata import Segment

try:  # pragma: no cover - exercised implicitly by every call
    from numba import njit
except ImportError:  # pragma: no cover

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


__all__ = ["PROB_FLOOR", "Assignment", "match_cost", "build_cost_matrix", "match_segments", "solve_lap"]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]  # (segment index, token index)
    unmatched_tokens: frozenset[int]

    @property
    def token_for_segment(self) -> dict[int, int]:
        return {n: m for n, m in self.pairs}

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[n, m] for n, m in self.pairs))


def match_cost(token_probs: np.ndarray, attn_s2f: np.ndarray, segment: Segment, token: int) -> float:
    """Cost of pairing one segment with one token.

    ``token_probs`` is the final-block (M, S+1) token classification;
    ``attn_s2f`` the final-block (T, M) stage-to-frame attention map.
    """
    prob = max(float(token_probs[token, segment.label]), PROB_FLOOR)
    attn = np.maximum(attn_s2f[segment.start : segment.end, token], PROB_FLOOR)
    return -np.log(prob) - float(np.mean(np.log(attn)))


def build_cost_matrix(token_probs: np.ndarray, attn_s2f: np.ndarray, segments: list[Segment]) -> np.ndarray:
    """(N, M) cost matrix over all segment/token pairs (vectorized)."""
    num_tokens = token_probs.shape[0]
    if len(segments) > num_tokens:
        raise CapacityError(f"{len(segments)} segments exceed {num_tokens} tokens")
    log_attn = np.log(np.maximum(attn_s2f, PROB_FLOOR))
    log_prob = np.log(np.maximum(token_probs, PROB_FLOOR))
    cost = np.empty((len(segments), num_tokens))
    for n, seg in enumerate(segments):
        cost[n] = -log_prob[:, seg.label] - log_attn[seg.start : seg.end, :].mean(axis=0)
    return cost


@njit(cache=True)
def _jv_rect(cost: np.ndarray):  # pragma: no cover - compiled
    """Shortest-augmenting-path LAP for an (N, M) matrix, N <= M.

    Returns (col_for_row, u, v). The potentials satisfy
    cost[i, j] - u[i] - v[j] >= 0 everywhere, with equality on assigned
    edges; v is <= 0 throughout and exactly 0 on unassigned columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_for_col = np.zeros(m + 1, dtype=np.int64)  # 0 = free (1-based rows)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_for_col[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = row_for_col[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[row_for_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_for_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_for_col[j0] = row_for_col[j1]
            j0 = j1
    col_for_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if row_for_col[j] > 0:
            col_for_row[row_for_col[j] - 1] = j - 1
    return col_for_row, u[1 : n + 1], v[1 : m + 1]


def solve_lap(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """LAP on an N x M matrix (N <= M): assignment plus dual potentials."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] > cost.shape[1]:
        raise InputError(f"solve_lap needs an N<=M matrix, got {cost.shape}")
    return _jv_rect(cost)


def _kuhn_saturates(adjacency: list[np.ndarray], num_cols: int) -> bool:
    """Can every left vertex be matched (augmenting paths)."""
    match_col = np.full(num_cols, -1, dtype=np.int64)

    def try_vertex(r: int, visited: np.ndarray) -> bool:
        for c in adjacency[r]:
            if visited[c]:
                continue
            visited[c] = True
            if match_col[c] < 0 or try_vertex(match_col[c], visited):
                match_col[c] = r
                return True
        return False

    for r in range(len(adjacency)):
        if not try_vertex(r, np.zeros(num_cols, dtype=bool)):
            return False
    return True


def _extendable(tight: np.ndarray, dummy_ok: np.ndarray, used: np.ndarray, next_row: int) -> bool:
    """Can rows next_row.. still complete an optimal assignment.

    Feasible iff (a) the remaining segments can be saturated by unused
    tight columns and (b) every unused column that dummy rows cannot
    absorb (v < 0) can be saturated from the remaining segments. By the
    Mendelsohn-Dulmage theorem a matching achieving both then exists.
    """
    n, m = tight.shape
    rows = list(range(next_row, n))
    row_adj = [np.flatnonzero(tight[r] & ~used) for r in rows]
    if any(a.size == 0 for a in row_adj):
        return False
    if not _kuhn_saturates(row_adj, m):
        return False
    must_cover = np.flatnonzero(~dummy_ok & ~used)
    col_adj = [np.flatnonzero(tight[next_row:, c]) for c in must_cover]
    if any(a.size == 0 for a in col_adj):
        return False
    return _kuhn_saturates(col_adj, n - next_row)


def match_segments(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective assignment of N segments to M >= N tokens.

    Ties between equally cheap assignments are broken toward the
    lexicographically smallest token-index sequence in segment order.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise CapacityError(f"{n} segments exceed {m} tokens")
    if not np.all(np.isfinite(cost)):
        raise InputError("cost matrix contains non-finite entries")
    if n == 0:
        return Assignment(pairs=(), unmatched_tokens=frozenset(range(m)))

    col_for_row, u, v = _jv_rect(cost)

    # every optimal assignment lives on zero-reduced-cost edges; columns
    # with v = 0 are the ones an optimal solution may leave unmatched
    tol = 1e-9 * (1.0 + float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= tol
    tight[np.arange(n), col_for_row] = True  # guard against float drift
    if int(tight.sum()) > n:  # ties possible: canonicalize lexicographically
        dummy_ok = v >= -tol
        used = np.zeros(m, dtype=bool)
        for row in range(n):
            picked = -1
            for cand in np.flatnonzero(tight[row] & ~used):
                used[cand] = True
                if _extendable(tight, dummy_ok, used, row + 1):
                    picked = int(cand)
                    break
                used[cand] = False
            if picked < 0:  # numerically degenerate duals: first free tight column
                free = np.flatnonzero(~used)
                tight_free = free[tight[row, free]]
                picked = int(tight_free[0]) if tight_free.size else int(free[0])
                used[picked] = True
            col_for_row[row] = picked

    pairs = tuple((seg, int(col_for_row[seg])) for seg in range(n))
    unmatched = frozenset(range(m)) - {int(c) for c in col_for_row}
    return Assignment(pairs=pairs, unmatched_tokens=unmatched)
