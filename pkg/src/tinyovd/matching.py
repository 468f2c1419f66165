"""Query-to-target assignment.

Object queries are matched one-to-one to ground truth by an optimal
bipartite matcher (shortest augmenting path with dual potentials).
Auxiliary queries never go through the matcher: each one is permanently
bound to the noisy sample that created it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .geometry import Box, giou_matrix, to_center_form
from .losses import LossWeights

# Reduced costs / candidate totals within this relative slack are treated
# as exact ties and broken lexicographically.
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    unmatched_queries: tuple[int, ...]

    @property
    def query_for_target(self) -> dict[int, int]:
        return {t: q for q, t in self.pairs}


def build_cost_matrix(
    query_scores: np.ndarray,
    query_boxes: list[Box],
    gt_boxes: list[Box],
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """Matching cost: -p(category of target) plus weighted L1 and GIoU terms.

    ``query_scores[q, t]`` must already be the probability query q assigns
    to target t's category.
    """
    nq, nt = len(query_boxes), len(gt_boxes)
    q_corners = np.array([b.as_array() for b in query_boxes]).reshape(nq, 4)
    t_corners = np.array([b.as_array() for b in gt_boxes]).reshape(nt, 4)
    q_cf = np.array([to_center_form(b) for b in query_boxes]).reshape(nq, 4)
    t_cf = np.array([to_center_form(b) for b in gt_boxes]).reshape(nt, 4)
    return cost_matrix_from_arrays(query_scores, q_corners, q_cf, t_corners, t_cf, weights)


def cost_matrix_from_arrays(
    query_scores: np.ndarray,
    q_corners: np.ndarray,
    q_cf: np.ndarray,
    t_corners: np.ndarray,
    t_cf: np.ndarray,
    weights: LossWeights,
) -> np.ndarray:
    """Vectorized cost assembly over precomputed corner and center forms."""
    scores = np.asarray(query_scores, dtype=np.float64)
    nq, nt = len(q_corners), len(t_corners)
    if scores.shape != (nq, nt):
        raise ShapeError(f"scores shape {scores.shape} != ({nq}, {nt})")
    l1 = np.abs(q_cf[:, None, :] - t_cf[None, :, :]).sum(axis=2)
    g = giou_matrix(q_corners, t_corners)
    return weights.w_cls * (-scores) + weights.w_l1 * l1 + weights.w_giou * (1.0 - g)


def _solve_rect(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Minimum-cost assignment for an n x m matrix with n <= m.

    Returns (col4row, u, v, total). Shortest-augmenting-path construction,
    scanning columns in index order so the result is deterministic.
    """
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(m, -1, dtype=np.int64)

    for cur_row in range(n):
        shortest = np.full(m, np.inf)
        path = np.full(m, -1, dtype=np.int64)
        scanned_cols = np.zeros(m, dtype=bool)
        scanned_rows = np.zeros(n, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            free = ~scanned_cols
            reduced = min_val + cost[i, free] - u[i] - v[free]
            idx_free = np.flatnonzero(free)
            better = reduced < shortest[idx_free]
            shortest[idx_free[better]] = reduced[better]
            path[idx_free[better]] = i
            # pick the cheapest unscanned column; prefer an unassigned one on ties
            order = np.lexsort((idx_free, row4col[idx_free] != -1, shortest[idx_free]))
            j = idx_free[order[0]]
            if not np.isfinite(shortest[j]):
                raise DomainError("cost matrix is not finite")
            min_val = shortest[j]
            scanned_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
        u[cur_row] += min_val
        on_path = scanned_rows.copy()
        on_path[cur_row] = False
        for r in np.flatnonzero(on_path):
            u[r] += min_val - shortest[col4row[r]]
        for c in np.flatnonzero(scanned_cols):
            v[c] -= min_val - shortest[c]
        # augment backwards from the sink
        j = sink
        while j != -1:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
    total = float(cost[np.arange(n), col4row].sum())
    return col4row, u, v, total


def _has_unique_optimum(cost: np.ndarray, col4row: np.ndarray, u: np.ndarray, v: np.ndarray) -> bool:
    """Whether the found assignment is the only optimal one.

    By complementary slackness against the solver's optimal duals, every
    alternative optimum decomposes into alternating cycles of tight edges,
    or alternating paths that trade a matched zero-potential column for an
    unmatched one. Absence of both certifies uniqueness; zero reduced cost
    alone does not (rectangular duals are routinely degenerate).
    """
    n, m = cost.shape
    tol = _TIE_RTOL * max(1.0, float(np.abs(cost).max()))
    reduced = cost - u[:, None] - v[None, :]
    row_of = {int(col4row[r]): r for r in range(n)}
    # row-level digraph: r -> r2 when r has a tight edge into r2's column
    succ: list[list[int]] = [[] for _ in range(n)]
    has_exit = [False] * n  # tight edge to an unmatched column
    for r in range(n):
        tight = np.flatnonzero(np.abs(reduced[r]) <= tol)
        for c in tight:
            c = int(c)
            if c == int(col4row[r]):
                continue
            if c in row_of:
                succ[r].append(row_of[c])
            else:
                has_exit[r] = True
    # any directed cycle = swap among matched columns at equal cost
    color = [0] * n  # 0 white, 1 gray, 2 black
    for start in range(n):
        if color[start]:
            continue
        stack = [(start, iter(succ[start]))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == 1:
                    return False  # cycle
                if color[nxt] == 0:
                    color[nxt] = 1
                    stack.append((nxt, iter(succ[nxt])))
                    advanced = True
                    break
            if not advanced:
                color[node] = 2
                stack.pop()
    # exchange path: start where releasing the matched column is free (v ~ 0)
    starts = [r for r in range(n) if abs(v[int(col4row[r])]) <= tol]
    seen = set(starts)
    queue = list(starts)
    while queue:
        r = queue.pop()
        if has_exit[r]:
            return False
        for r2 in succ[r]:
            if r2 not in seen:
                seen.add(r2)
                queue.append(r2)
    return True


def _lex_optimal_pairs(cost: np.ndarray, total: float) -> list[tuple[int, int]]:
    """Lexicographically smallest optimal pair sequence, by fix-and-resolve.

    cost is queries x targets. Fixes pairs in (query, target) order,
    keeping a candidate only if the remaining subproblem can still reach
    the optimal total. Only runs when ties exist, so the extra solves do
    not matter for performance.
    """
    nq, nt = cost.shape
    tol = _TIE_RTOL * max(1.0, float(np.abs(cost).max())) * max(nt, 1)
    rows = list(range(nq))
    cols = list(range(nt))
    remaining_total = total
    pairs: list[tuple[int, int]] = []
    while cols:
        fixed = False
        for qi, q in enumerate(rows):
            for t in cols:
                sub_rows = rows[qi + 1 :]
                sub_cols = [c for c in cols if c != t]
                if len(sub_rows) < len(sub_cols):
                    continue
                if sub_cols:
                    sub = cost[np.ix_(sub_rows, sub_cols)].T
                    _, _, _, sub_total = _solve_rect(sub)
                else:
                    sub_total = 0.0
                if abs(cost[q, t] + sub_total - remaining_total) <= tol:
                    pairs.append((q, t))
                    remaining_total -= cost[q, t]
                    rows = sub_rows
                    cols = sub_cols
                    fixed = True
                    break
            if fixed:
                break
        if not fixed:  # numerical slack too tight; fall back to the solver's answer
            sub = cost[np.ix_(rows, cols)].T
            col4row, _, _, _ = _solve_rect(sub)
            pairs.extend(sorted((rows[col4row[k]], cols[k]) for k in range(len(cols))))
            break
    return pairs


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of targets (columns) to queries (rows).

    Every target is matched; leftover queries are reported unmatched. Ties
    between equal-cost optima are broken toward the lexicographically
    smallest (query, target) pair sequence.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2D, got shape {cost.shape}")
    nq, nt = cost.shape
    if nt > nq:
        raise ShapeError(f"more targets ({nt}) than queries ({nq})")
    if nt == 0:
        return Assignment(pairs=(), unmatched_queries=tuple(range(nq)))
    if not np.all(np.isfinite(cost)):
        raise DomainError("cost matrix contains non-finite entries")
    col4row, u, v, total = _solve_rect(cost.T)
    if _has_unique_optimum(cost.T, col4row, u, v):
        pairs = sorted((int(col4row[t]), t) for t in range(nt))
    else:
        pairs = _lex_optimal_pairs(cost, total)
    matched = {q for q, _ in pairs}
    unmatched = tuple(q for q in range(nq) if q not in matched)
    return Assignment(pairs=tuple(pairs), unmatched_queries=unmatched)


def assign_auxiliary(samples) -> list[tuple[int, int]]:
    """Fixed binding: auxiliary query k regresses toward sample k's ground truth."""
    return [(k, s.gt_index) for k, s in enumerate(samples)]
