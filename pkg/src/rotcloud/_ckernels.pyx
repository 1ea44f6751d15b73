# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Must agree bit-for-bit with ``_pykernels``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def max_over_points(const double[:, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t b, n, c
    out = np.empty((B, C), dtype=np.float64)
    idx = np.zeros((B, C), dtype=np.int64)
    cdef double[:, ::1] o = out
    cdef long long[:, ::1] ix = idx
    if N == 0:
        raise ValueError("max_over_points needs at least one point")
    for b in range(B):
        for c in range(C):
            o[b, c] = x[b, 0, c]
        for n in range(1, N):
            for c in range(C):
                # strict comparison keeps the lowest index on ties
                if x[b, n, c] > o[b, c]:
                    o[b, c] = x[b, n, c]
                    ix[b, c] = n
    return out, idx


def scatter_max_grad(const double[:, ::1] g, const long long[:, ::1] idx, Py_ssize_t n_points):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1]
    cdef Py_ssize_t b, c
    out = np.zeros((B, n_points, C), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    for b in range(B):
        for c in range(C):
            o[b, idx[b, c], c] += g[b, c]
    return out


def nearest_neighbors(const double[:, ::1] queries, const double[:, ::1] ref):
    """Index and squared distance of the nearest ``ref`` row for each query."""
    cdef Py_ssize_t M = queries.shape[0], N = ref.shape[0]
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, dz, d, bestd
    if N == 0:
        raise ValueError("reference set is empty")
    idx = np.empty(M, dtype=np.int64)
    dist = np.empty(M, dtype=np.float64)
    cdef long long[::1] ix = idx
    cdef double[::1] ds = dist
    for i in range(M):
        best = 0
        bestd = 0.0
        for j in range(N):
            dx = queries[i, 0] - ref[j, 0]
            dy = queries[i, 1] - ref[j, 1]
            dz = queries[i, 2] - ref[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if j == 0 or d < bestd:
                bestd = d
                best = j
        ix[i] = best
        ds[i] = bestd
    return idx, dist


def affine_relu(const double[:, ::1] x, const double[::1] scale, const double[::1] shift):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t r, c
    cdef double t
    out = np.empty((R, C), dtype=np.float64)
    cdef double[:, ::1] o = out
    for r in range(R):
        for c in range(C):
            t = x[r, c] * scale[c]
            t = t + shift[c]
            o[r, c] = t if t > 0.0 else 0.0
    return out


def affine_relu_backward(const double[:, ::1] g, const double[:, ::1] x,
                         const double[:, ::1] y, const double[::1] scale):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t r, c
    cdef double gm
    gx = np.empty((R, C), dtype=np.float64)
    gs = np.zeros(C, dtype=np.float64)
    gb = np.zeros(C, dtype=np.float64)
    cdef double[:, ::1] ox = gx
    cdef double[::1] os = gs, ob = gb
    for r in range(R):
        for c in range(C):
            gm = g[r, c] if y[r, c] > 0.0 else 0.0
            ox[r, c] = gm * scale[c]
            os[c] += gm * x[r, c]
            ob[c] += gm
    return gx, gs, gb
