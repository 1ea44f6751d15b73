"""Pure-numpy versions of the compiled kernels (same results, bit for bit)."""

import numpy as np


def max_over_points(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape[1] == 0:
        raise ValueError("max_over_points needs at least one point")
    # argmax returns the first occurrence, i.e. the lowest point index on ties
    idx = np.argmax(x, axis=1)
    out = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return out, idx.astype(np.int64)


def scatter_max_grad(g, idx, n_points):
    B, C = g.shape
    out = np.zeros((B, n_points, C), dtype=np.float64)
    np.put_along_axis(out, idx[:, None, :], g[:, None, :], axis=1)
    return out


def nearest_neighbors(queries, ref):
    queries = np.asarray(queries, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if ref.shape[0] == 0:
        raise ValueError("reference set is empty")
    diff = queries[:, None, :] - ref[None, :, :]
    # explicit left-to-right sum matches the compiled loop exactly
    d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    idx = np.argmin(d, axis=1)
    return idx.astype(np.int64), d[np.arange(len(queries)), idx]


def affine_relu(x, scale, shift):
    t = x * scale + shift
    return np.where(t > 0.0, t, 0.0)


def affine_relu_backward(g, x, y, scale):
    gm = np.where(y > 0.0, g, 0.0)
    # row-by-row accumulation, the same order as the compiled loop
    gs = np.zeros(x.shape[1])
    gb = np.zeros(x.shape[1])
    prod = gm * x
    for r in range(x.shape[0]):
        gs += prod[r]
        gb += gm[r]
    return gm * scale, gs, gb
