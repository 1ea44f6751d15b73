"""Compare the compiled and numpy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on
training-sized inputs with both backends, outputs are checked for exact
equality, and a full forward/backward pass of the encoder is timed with
each backend swapped in.
"""

import argparse
import timeit

import numpy as np

from rotcloud import _pykernels, kernels

try:
    from rotcloud import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    B, N, C = 8, 256, 256
    x3 = rng.normal(size=(B, N, C))
    _, idx = _pykernels.max_over_points(x3)
    x2 = rng.normal(size=(B * N, 128))
    scale, shift = rng.normal(size=128), rng.normal(size=128)
    y2 = _pykernels.affine_relu(x2, scale, shift)
    q, ref = rng.normal(size=(10, 3)), rng.normal(size=(1024, 3))
    return {
        "max_over_points": (x3,),
        "scatter_max_grad": (rng.normal(size=(B, C)), idx, N),
        "nearest_neighbors": (q, ref),
        "affine_relu": (x2, scale, shift),
        "affine_relu_backward": (rng.normal(size=x2.shape), x2, y2, scale),
    }


def best_of(fn, repeat):
    t = timeit.Timer(fn)
    n, _ = t.autorange()
    return min(t.repeat(repeat, n)) / n


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def train_step_time(repeat):
    from rotcloud import autodiff as ad
    from rotcloud import encoder as enc

    rng = np.random.default_rng(0)
    model = enc.init_model("classify", 18, rng)
    pts = rng.normal(size=(8, 256, 3))
    pts /= np.linalg.norm(pts, axis=-1).max()
    labels = rng.integers(18, size=8)

    def step():
        tape = ad.Tape()
        _, out, _ = enc.forward(model, pts, tape)
        tape.backward(ad.softmax_cross_entropy(out, labels))

    return best_of(step, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  identical")
    for name, inputs in cases(rng).items():
        py, cy = getattr(_pykernels, name), getattr(_ckernels, name)
        tp = best_of(lambda: py(*inputs), args.repeat)
        tc = best_of(lambda: cy(*inputs), args.repeat)
        ok = same(py(*inputs), cy(*inputs))
        print(f"{name:<22}{tp * 1e3:>10.3f}{tc * 1e3:>11.3f}{tp / tc:>8.2f}x  {ok}")

    saved = kernels._impl
    try:
        timings = {}
        for label, impl in (("numpy", _pykernels), ("cython", _ckernels)):
            kernels._impl = impl
            timings[label] = train_step_time(args.repeat)
    finally:
        kernels._impl = saved
    print(f"\nencoder forward+backward, 8 clouds x 256 points: numpy {timings['numpy'] * 1e3:.1f} ms, "
          f"cython {timings['cython'] * 1e3:.1f} ms ({timings['numpy'] / timings['cython']:.2f}x)")


if __name__ == "__main__":
    main()
