# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled accumulation of local-linear smoothing moments (Epanechnikov kernel).

Each data point only touches grid nodes inside its kernel support, found by
binary search, so cost is O(n_points * support) instead of O(n_points * G).
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _lower(const double[::1] g, double v) noexcept nogil:
    # first index with g[i] > v
    cdef Py_ssize_t lo = 0, hi = g.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if g[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


def moments_1d(const double[::1] x, const double[::1] y, const double[::1] grid, double h):
    """Return an array (G, 5) with S0, S1, S2, T0, T1 at every grid node."""
    cdef Py_ssize_t n = x.shape[0], G = grid.shape[0]
    out_arr = np.zeros((G, 5), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, a, lo, hi
    cdef double u, k, d, xv, yv
    with nogil:
        for p in range(n):
            xv = x[p]
            yv = y[p]
            lo = _lower(grid, xv - h)
            hi = _lower(grid, xv + h)
            for a in range(lo, hi):
                d = xv - grid[a]
                u = d / h
                if u >= 1.0 or u <= -1.0:
                    continue
                k = 0.75 * (1.0 - u * u)
                out[a, 0] += k
                out[a, 1] += k * d
                out[a, 2] += k * d * d
                out[a, 3] += k * yv
                out[a, 4] += k * d * yv
    return out_arr


def moments_2d(const double[::1] s, const double[::1] t, const double[::1] z,
               const double[::1] grid_s, const double[::1] grid_t,
               double hs, double ht):
    """Return an array (Gs, Gt, 9) of product-kernel moments.

    Order: S00, S10, S01, S20, S11, S02, T00, T10, T01 where the first index
    is the power of (s - grid_s) and the second of (t - grid_t); T carries z.
    """
    cdef Py_ssize_t n = s.shape[0], Gs = grid_s.shape[0], Gt = grid_t.shape[0]
    out_arr = np.zeros((Gs, Gt, 9), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    ks_arr = np.empty(Gs, dtype=np.float64)
    kt_arr = np.empty(Gt, dtype=np.float64)
    cdef double[::1] ks = ks_arr
    cdef double[::1] kt = kt_arr
    cdef Py_ssize_t p, a, b, alo, ahi, blo, bhi
    cdef double u, ds, dt, w, sv, tv, zv
    with nogil:
        for p in range(n):
            sv = s[p]
            tv = t[p]
            zv = z[p]
            alo = _lower(grid_s, sv - hs)
            ahi = _lower(grid_s, sv + hs)
            blo = _lower(grid_t, tv - ht)
            bhi = _lower(grid_t, tv + ht)
            for a in range(alo, ahi):
                u = (sv - grid_s[a]) / hs
                ks[a] = 0.75 * (1.0 - u * u) if -1.0 < u < 1.0 else 0.0
            for b in range(blo, bhi):
                u = (tv - grid_t[b]) / ht
                kt[b] = 0.75 * (1.0 - u * u) if -1.0 < u < 1.0 else 0.0
            for a in range(alo, ahi):
                if ks[a] == 0.0:
                    continue
                ds = sv - grid_s[a]
                for b in range(blo, bhi):
                    if kt[b] == 0.0:
                        continue
                    dt = tv - grid_t[b]
                    w = ks[a] * kt[b]
                    out[a, b, 0] += w
                    out[a, b, 1] += w * ds
                    out[a, b, 2] += w * dt
                    out[a, b, 3] += w * ds * ds
                    out[a, b, 4] += w * ds * dt
                    out[a, b, 5] += w * dt * dt
                    out[a, b, 6] += w * zv
                    out[a, b, 7] += w * ds * zv
                    out[a, b, 8] += w * dt * zv
    return out_arr
