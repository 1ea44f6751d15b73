"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and ``ROTCLOUD_PURE_PYTHON``
is unset. Both backends return identical arrays.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("ROTCLOUD_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def max_over_points(x):
    """Per-channel max over axis 1 of a (B, N, C) array, with argmax indices."""
    return _impl.max_over_points(np.ascontiguousarray(x, dtype=np.float64))


def scatter_max_grad(g, idx, n_points):
    """Route a (B, C) gradient back to the argmax rows of a (B, N, C) input."""
    return _impl.scatter_max_grad(
        np.ascontiguousarray(g, dtype=np.float64),
        np.ascontiguousarray(idx, dtype=np.int64),
        int(n_points),
    )


def nearest_neighbors(queries, ref):
    """For each query row, index of and squared distance to the nearest ref row.

    Ties go to the lowest reference index.
    """
    q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    r = np.ascontiguousarray(ref, dtype=np.float64).reshape(-1, 3)
    return _impl.nearest_neighbors(q, r)


def affine_relu(x, scale, shift):
    """``max(x * scale + shift, 0)`` for an (R, C) array with per-column affine."""
    return _impl.affine_relu(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(scale, dtype=np.float64),
        np.ascontiguousarray(shift, dtype=np.float64),
    )


def affine_relu_backward(g, x, y, scale):
    """Gradients (dx, dscale, dshift) of :func:`affine_relu` given its output ``y``."""
    return _impl.affine_relu_backward(
        np.ascontiguousarray(g, dtype=np.float64),
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(scale, dtype=np.float64),
    )
