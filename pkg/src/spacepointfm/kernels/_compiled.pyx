# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: first-order linear recurrence and assignment solve.

Both functions mirror spacepointfm.kernels._fallback operation for operation so
the two backends produce bit-identical results.
"""

import numpy as np

cimport cython
cimport numpy as cnp


ctypedef fused floating:
    float
    double


def scan_forward(floating[:, ::1] a, floating[:, ::1] b):
    """h[t] = a[t] * h[t-1] + b[t] with h[-1] = 0, over shape (T, C)."""
    cdef Py_ssize_t T = a.shape[0]
    cdef Py_ssize_t C = a.shape[1]
    if floating is float:
        out = np.empty((T, C), dtype=np.float32)
    else:
        out = np.empty((T, C), dtype=np.float64)
    cdef floating[:, ::1] h = out
    cdef Py_ssize_t t, c
    with nogil:
        for c in range(C):
            h[0, c] = b[0, c]
        for t in range(1, T):
            for c in range(C):
                h[t, c] = a[t, c] * h[t - 1, c] + b[t, c]
    return out


def scan_backward(floating[:, ::1] a, floating[:, ::1] h, floating[:, ::1] g):
    """Reverse recurrence for the scan.

    delta[t] = g[t] + a[t+1] * delta[t+1]; da[t] = delta[t] * h[t-1]; db[t] = delta[t].
    Rows are walked t-descending with a carried delta row, keeping the
    traversal cache-friendly on row-major input.
    """
    cdef Py_ssize_t T = a.shape[0]
    cdef Py_ssize_t C = a.shape[1]
    if floating is float:
        da_arr = np.zeros((T, C), dtype=np.float32)
        db_arr = np.empty((T, C), dtype=np.float32)
        delta_arr = np.empty(C, dtype=np.float32)
    else:
        da_arr = np.zeros((T, C), dtype=np.float64)
        db_arr = np.empty((T, C), dtype=np.float64)
        delta_arr = np.empty(C, dtype=np.float64)
    cdef floating[:, ::1] da = da_arr
    cdef floating[:, ::1] db = db_arr
    cdef floating[::1] delta = delta_arr
    cdef Py_ssize_t t, c
    with nogil:
        for c in range(C):
            delta[c] = g[T - 1, c]
            db[T - 1, c] = delta[c]
            if T > 1:
                da[T - 1, c] = delta[c] * h[T - 2, c]
        for t in range(T - 2, -1, -1):
            if t > 0:
                for c in range(C):
                    delta[c] = g[t, c] + a[t + 1, c] * delta[c]
                    db[t, c] = delta[c]
                    da[t, c] = delta[c] * h[t - 1, c]
            else:
                for c in range(C):
                    delta[c] = g[t, c] + a[t + 1, c] * delta[c]
                    db[t, c] = delta[c]
    return da_arr, db_arr


def lap_solve(double[:, ::1] cost):
    """Minimum-cost perfect matching on a square cost matrix.

    O(n^3) shortest-augmenting-path with potentials. Returns (col_of_row,
    u, v) where the duals satisfy u[i] + v[j] <= cost[i, j] with equality
    on matched pairs.
    """
    cdef Py_ssize_t n = cost.shape[0]
    u_arr = np.zeros(n + 1, dtype=np.float64)
    v_arr = np.zeros(n + 1, dtype=np.float64)
    p_arr = np.zeros(n + 1, dtype=np.int64)
    way_arr = np.zeros(n + 1, dtype=np.int64)
    minv_arr = np.empty(n + 1, dtype=np.float64)
    used_arr = np.zeros(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef cnp.int64_t[::1] p = p_arr
    cdef cnp.int64_t[::1] way = way_arr
    cdef double[::1] minv = minv_arr
    cdef cnp.uint8_t[::1] used = used_arr
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double cur, delta
    cdef double INF = np.inf

    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INF
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INF
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while j0 != 0:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1

    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, u_arr[1:], v_arr[1:]
