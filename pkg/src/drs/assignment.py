"""Exact maximum-weight bipartite assignment (Kuhn-Munkres).

Rectangular weight matrices are padded to square with zero-weight dummy
columns/rows, so leaving a vertex unmatched always has weight 0.  Weights
must be non-negative; the solver maximizes total weight and returns only the
pairs that carry positive weight.
"""

from __future__ import annotations

from typing import Sequence

_EPS = 1e-9


def max_weight_assignment(weights: Sequence[Sequence[float]]) -> list[tuple[int, int]]:
    """Pairs (row, col) of a maximum-total-weight one-to-one assignment.

    Zero-weight pairs are dropped from the result, so rows/columns that only
    "match" padding or worthless partners count as unmatched.
    """
    n_rows = len(weights)
    n_cols = len(weights[0]) if n_rows else 0
    if n_rows == 0 or n_cols == 0:
        return []
    n = max(n_rows, n_cols)
    w = [[0.0] * n for _ in range(n)]
    for i in range(n_rows):
        row = weights[i]
        if len(row) != n_cols:
            raise ValueError("weight matrix is ragged")
        for j in range(n_cols):
            value = float(row[j])
            if value < 0.0:
                raise ValueError(f"negative weight at ({i}, {j})")
            w[i][j] = value

    # Feasible labels: lu[u] + lv[v] >= w[u][v] throughout.
    lu = [max(w[u]) for u in range(n)]
    lv = [0.0] * n
    match_u = [-1] * n  # row -> col
    match_v = [-1] * n  # col -> row

    for root in range(n):
        # Grow an alternating tree from the free row `root` until an
        # augmenting path to a free column appears, relaxing labels by the
        # minimum slack when the tree gets stuck.
        slack = [lu[root] + lv[v] - w[root][v] for v in range(n)]
        slack_u = [root] * n
        in_tree_u = {root}
        parent_v = [-1] * n
        in_tree_v = [False] * n
        while True:
            delta = min(slack[v] for v in range(n) if not in_tree_v[v])
            if delta > _EPS:
                for u in in_tree_u:
                    lu[u] -= delta
                for v in range(n):
                    if in_tree_v[v]:
                        lv[v] += delta
                    else:
                        slack[v] -= delta
            v_next = next(
                v for v in range(n) if not in_tree_v[v] and slack[v] <= _EPS
            )
            in_tree_v[v_next] = True
            parent_v[v_next] = slack_u[v_next]
            u_matched = match_v[v_next]
            if u_matched == -1:
                # Augment along the alternating path back to the root.
                v = v_next
                while v != -1:
                    u = parent_v[v]
                    v_prev = match_u[u]
                    match_u[u] = v
                    match_v[v] = u
                    v = v_prev
                break
            in_tree_u.add(u_matched)
            for v in range(n):
                if not in_tree_v[v]:
                    s = lu[u_matched] + lv[v] - w[u_matched][v]
                    if s < slack[v]:
                        slack[v] = s
                        slack_u[v] = u_matched

    return [
        (u, match_u[u])
        for u in range(n_rows)
        if 0 <= match_u[u] < n_cols and w[u][match_u[u]] > 0.0
    ]
