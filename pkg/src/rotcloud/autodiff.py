"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Each forward pass records onto its own :class:`Tape`; nodes are appended in
creation order, so walking the tape backwards is a valid reverse topological
order. Parameters live outside tapes as plain arrays and enter a pass as leaf
variables, which keeps concurrent passes (one tape per worker) independent.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import kernels


class Var:
    __slots__ = ("value", "grad", "tape", "id", "parents", "backward_fn", "name", "needs_grad")

    def __init__(self, value, tape, parents=(), backward_fn=None, name=None, needs_grad=True):
        self.value = value
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.needs_grad = needs_grad
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value, name=None, needs_grad=True) -> Var:
        """Input node. ``needs_grad=False`` marks data whose gradient is never read."""
        return Var(np.asarray(value, dtype=np.float64), self, name=name, needs_grad=needs_grad)

    def record(self, value, parents, backward_fn) -> Var:
        needs = any(isinstance(p, Var) and p.needs_grad for p in parents)
        return Var(value, self, tuple(parents), backward_fn, needs_grad=needs)

    def zero_grad(self):
        for node in self.nodes:
            node.grad = None

    def backward(self, root: Var) -> None:
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        self.zero_grad()
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.id + 1]):
            if node.grad is None or node.backward_fn is None or not node.needs_grad:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not isinstance(parent, Var):
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)


def backward(root: Var) -> None:
    """Populate ``.grad`` of every node on ``root``'s tape with d(root)/d(node)."""
    root.tape.backward(root)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _wants(x) -> bool:
    return isinstance(x, Var) and x.needs_grad


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast("add", av, bv)
    return _tape_of(a, b).record(
        av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))
    )


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast("sub", av, bv)
    return _tape_of(a, b).record(
        av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))
    )


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast("mul", av, bv)
    return _tape_of(a, b).record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast("div", av, bv)
    out = av / bv
    return _tape_of(a, b).record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (g / (2.0 * out),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def scale_shift(x: Var, scale: Var, shift: Var) -> Var:
    """Learned per-channel affine map over the last axis."""
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(
            f"scale_shift: channel count {c} vs scale {scale.shape} / shift {shift.shape}"
        )
    xv, sv = x.value, scale.value
    red = tuple(range(x.value.ndim - 1))
    return x.tape.record(
        xv * sv + shift.value,
        (x, scale, shift),
        lambda g: (g * sv, (g * xv).sum(axis=red), g.sum(axis=red)),
    )


def affine_relu(x: Var, scale: Var, shift: Var) -> Var:
    """Fused ``relu(scale_shift(x, scale, shift))`` for a 2-D (rows, C) input."""
    c = x.shape[-1]
    if x.value.ndim != 2 or scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(
            f"affine_relu: input {x.shape} vs scale {scale.shape} / shift {shift.shape}"
        )
    xv, sv = x.value, scale.value
    out = kernels.affine_relu(xv, sv, shift.value)
    return x.tape.record(out, (x, scale, shift),
                         lambda g: kernels.affine_relu_backward(g, xv, out, sv))


# --------------------------------------------------------------------------
# shape and reduction


def matmul(a, b) -> Var:
    """``a @ b`` for 2-D operands or a batched (..., N, C) times (C, D)."""
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ValueError(f"matmul: shapes {av.shape} and {bv.shape} are not aligned")
    if bv.ndim != 2:
        raise ValueError(f"matmul: right operand must be 2-D, got shape {bv.shape}")

    def bw(g):
        ga = g @ bv.T if _wants(a) else None
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if _wants(b) else None
        return ga, gb

    return _tape_of(a, b).record(av @ bv, (a, b), bw)


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else a.shape[axis]
    return vsum(a, axis) * (1.0 / n)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {old} as {shape}") from None
    return a.tape.record(out, (a,), lambda g: (g.reshape(old),))


def getitem(a: Var, index) -> Var:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape.record(a.value[index], (a,), bw)


def concat(xs, axis=-1) -> Var:
    vals = [_val(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[v.shape for v in vals]}") from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _tape_of(*xs).record(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def max_over_points(x: Var) -> Var:
    """Max over the point axis: (B, N, C) -> (B, C), or (N, C) -> (C,).

    Ties send the whole gradient to the lowest point index.
    """
    v = x.value
    squeeze = v.ndim == 2
    if squeeze:
        v = v[None]
    if v.ndim != 3:
        raise ValueError(f"max_over_points: expected (B, N, C) or (N, C), got {x.shape}")
    out, idx = kernels.max_over_points(v)
    n = v.shape[1]

    def bw(g):
        g3 = kernels.scatter_max_grad(g[None] if squeeze else g, idx, n)
        return (g3[0] if squeeze else g3,)

    return x.tape.record(out[0] if squeeze else out, (x,), bw)


# --------------------------------------------------------------------------
# losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean cross-entropy of (B, K) logits against integer labels."""
    z = logits.value
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (z.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {z.shape[1]})")
    logp = log_softmax(z)
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= g / len(labels)
        return (d[0] if squeeze else d,)

    return logits.tape.record(np.asarray(loss), (logits,), bw)


def mse(pred: Var, target) -> Var:
    """Mean squared error over all elements."""
    tv = _val(target)
    if pred.shape != tv.shape:
        raise ValueError(f"mse: shapes {pred.shape} and {tv.shape} differ")
    diff = pred.value - tv
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _tape_of(pred, target).record(np.asarray((diff * diff).mean()), (pred, target), bw)


def chamfer(a: Var, b) -> Var:
    """Batched chamfer loss between (B, M, 3) and (B, L, 3) point sets.

    Per item: mean squared distance from each point of ``a`` to its nearest
    point in ``b`` plus the same from ``b`` to ``a``; averaged over the batch.
    """
    av, bv = _val(a), _val(b)
    if av.ndim == 2:
        av, bv = av[None], bv[None]
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != 3:
        raise ValueError(f"chamfer: incompatible shapes {_val(a).shape} and {_val(b).shape}")
    B = av.shape[0]
    total = 0.0
    fwd, rev = [], []
    for i in range(B):
        ia, da = kernels.nearest_neighbors(av[i], bv[i])
        ib, db = kernels.nearest_neighbors(bv[i], av[i])
        fwd.append(ia)
        rev.append(ib)
        total += da.mean() + db.mean()

    def bw(g):
        ga = np.zeros_like(av)
        gb = np.zeros_like(bv)
        for i in range(B):
            m, l = av.shape[1], bv.shape[1]
            d1 = av[i] - bv[i][fwd[i]]
            ga[i] += 2.0 * d1 / m
            np.add.at(gb[i], fwd[i], -2.0 * d1 / m)
            d2 = bv[i] - av[i][rev[i]]
            gb[i] += 2.0 * d2 / l
            np.add.at(ga[i], rev[i], -2.0 * d2 / l)
        scale = g / B
        ga, gb = ga * scale, gb * scale
        shape_a, shape_b = _val(a).shape, _val(b).shape
        return ga.reshape(shape_a), gb.reshape(shape_b)

    return _tape_of(a, b).record(np.asarray(total / B), (a, b), bw)


# --------------------------------------------------------------------------
# optimizers


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        _check_finite(grads)
        for name, g in grads.items():
            params[name] -= self.lr * g


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        _check_finite(grads)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    SGD(lr).step(params, grads)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# --------------------------------------------------------------------------
# weights file: <u64 header length><JSON header><little-endian float64 payload>


def save_weights(path, params: dict, meta: dict | None = None) -> None:
    tensors, offset = [], 0
    for name, arr in params.items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"meta": meta or {}, "tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated weights file")
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    payload = raw[8 + n:]
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        start = t["offset"]
        if start + 8 * count > len(payload):
            raise ValueError(f"{path}: tensor {t['name']!r} runs past the end of the file")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        params[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
    return params, header["meta"]
