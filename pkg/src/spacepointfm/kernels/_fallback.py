"""Pure numpy versions of the compiled kernels.

Operation order matches _compiled exactly, so results are bit-identical
between backends; only speed differs.
"""

import numpy as np


def scan_forward(a, b):
    """h[t] = a[t] * h[t-1] + b[t] with h[-1] = 0, over shape (T, C)."""
    h = np.empty_like(b)
    h[0] = b[0]
    for t in range(1, a.shape[0]):
        h[t] = a[t] * h[t - 1] + b[t]
    return h


def scan_backward(a, h, g):
    """Reverse recurrence for the scan: (da, db) given upstream gradient g."""
    T = a.shape[0]
    da = np.zeros_like(a)
    db = np.empty_like(a)
    delta = g[T - 1].copy()
    db[T - 1] = delta
    if T > 1:
        da[T - 1] = delta * h[T - 2]
    for t in range(T - 2, -1, -1):
        delta = g[t] + a[t + 1] * delta
        db[t] = delta
        if t > 0:
            da[t] = delta * h[t - 1]
    return da, db


def lap_solve(cost):
    """Minimum-cost perfect matching on a square cost matrix.

    Shortest-augmenting-path with potentials, inner column scan vectorized.
    Returns (col_of_row, u, v); duals satisfy u[i] + v[j] <= cost[i, j]
    with equality on matched pairs.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            js = np.nonzero(~used[1:])[0] + 1
            cur = cost[i0 - 1, js - 1] - u[i0] - v[js]
            better = cur < minv[js]
            minv[js] = np.where(better, cur, minv[js])
            way[js[better]] = j0
            k = int(np.argmin(minv[js]))
            delta = minv[js[k]]
            j1 = int(js[k])
            # matched rows p[j] are distinct over used columns, so fancy += is safe
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:], v[1:]
