"""Optimal truth-to-query assignment.

hungarian() minimizes total cost over injective row-to-column maps (rows are
truth tracks, columns are queries, M <= N). Among equal-cost optima it returns
the lexicographically smallest assignment vector, found by a greedy sweep over
the tight edges of the optimal dual solution (complementary slackness: every
optimal assignment uses only tight edges).
"""

from __future__ import annotations

import numpy as np

from . import kernels


class MatchingError(ValueError):
    pass


def _tight_graph(cost_sq, u, v, scale):
    slack = cost_sq - u[:, None] - v[None, :]
    return np.abs(slack) <= 1e-9 * scale


def _kuhn_feasible(adj, start_row, n, banned_col):
    """Can rows start_row..n-1 be perfectly matched into non-banned columns?"""
    match_col = np.full(n, -1, dtype=np.int64)

    def try_row(r, visited):
        for c in np.nonzero(adj[r])[0]:
            if banned_col[c] or visited[c]:
                continue
            visited[c] = True
            if match_col[c] < 0 or try_row(match_col[c], visited):
                match_col[c] = r
                return True
        return False

    for r in range(start_row, n):
        if not try_row(r, np.zeros(n, dtype=bool)):
            return False
    return True


def _lex_canonicalize(cost_sq, tight, m_real, assignment):
    """Lexicographically smallest optimal assignment for the real rows."""
    n = cost_sq.shape[0]
    banned = np.zeros(n, dtype=bool)
    out = np.empty(m_real, dtype=np.int64)
    for j in range(m_real):
        candidates = np.nonzero(tight[j] & ~banned)[0]
        chosen = -1
        for c in candidates:
            banned[c] = True
            if _kuhn_feasible(tight, j + 1, n, banned):
                chosen = c
                break
            banned[c] = False
        if chosen < 0:
            # numerically degenerate tight graph: keep the solver's answer
            return assignment
        out[j] = chosen
    return out


def hungarian(cost):
    """Minimal-cost injective assignment of M rows to N >= M columns.

    Returns (assignment, total) where assignment[j] is the column of row j.
    Ties in total cost break to the lexicographically smallest assignment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be 2-d, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise MatchingError(f"more rows than columns ({m} > {n}); "
                            "configure at least as many queries as tracks")
    if m == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    padded = np.zeros((n, n), dtype=np.float64)
    padded[:m] = cost
    col_of_row, u, v = kernels.lap_solve(padded)
    assignment = col_of_row[:m].copy()
    scale = max(1.0, float(np.abs(cost).max()))
    tight = _tight_graph(padded, u, v, scale)
    # fast path: with a unique tight column per real row the optimum is unique
    if np.all(tight[:m].sum(axis=1) == 1):
        total = float(cost[np.arange(m), assignment].sum())
        return assignment, total
    assignment = _lex_canonicalize(padded, tight, m, assignment)
    total = float(cost[np.arange(m), assignment].sum())
    return assignment, total
