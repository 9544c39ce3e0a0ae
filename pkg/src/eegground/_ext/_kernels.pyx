# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled nearest-code search and valid-window 2-d filtering."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def nearest_code(const double[:, ::1] x, const double[:, ::1] codes):
    """Index and squared distance of the nearest row of ``codes`` for each row of ``x``.

    Distances are exact sums of squared differences; ties go to the lowest index.
    """
    cdef Py_ssize_t n = x.shape[0], k = codes.shape[0], d = x.shape[1]
    if codes.shape[1] != d:
        raise ValueError(f"feature dim {d} vs code dim {codes.shape[1]}")
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx_v = idx
    cdef double[::1] dist_v = dist
    cdef Py_ssize_t i, j, c
    cdef double best, acc, diff
    cdef long long arg
    with nogil:
        for i in range(n):
            best = 1e308
            arg = 0
            for j in range(k):
                acc = 0.0
                for c in range(d):
                    diff = x[i, c] - codes[j, c]
                    acc = acc + diff * diff
                    if acc >= best:
                        break
                if acc < best:
                    best = acc
                    arg = j
            idx_v[i] = arg
            dist_v[i] = best
    return idx, dist


def valid_filter2d(const double[:, ::1] img, const double[:, ::1] win):
    """Correlate ``img`` with ``win`` over fully-overlapping positions only."""
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t wh = win.shape[0], ww = win.shape[1]
    if wh > h or ww > w:
        raise ValueError(f"window {wh}x{ww} larger than image {h}x{w}")
    out = np.empty((h - wh + 1, w - ww + 1), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, a, b
    cdef double acc
    with nogil:
        for i in range(h - wh + 1):
            for j in range(w - ww + 1):
                acc = 0.0
                for a in range(wh):
                    for b in range(ww):
                        acc = acc + img[i + a, j + b] * win[a, b]
                o[i, j] = acc
    return out
