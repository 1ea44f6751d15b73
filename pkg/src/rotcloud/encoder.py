"""PointNet-style encoder: shared per-point MLP, global max-pool, task head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels

CLASSIFY = "classify"
AXISANGLE = "axisangle"
SIXD = "sixd"
KEYPOINTS = "keypoints"
HEADS = (CLASSIFY, AXISANGLE, SIXD, KEYPOINTS)


def head_output_size(head: str, k: int | None = None) -> int:
    if head == CLASSIFY:
        if not k or k < 2:
            raise ValueError("classification head needs k >= 2")
        return k
    if head == AXISANGLE:
        return 4
    if head == SIXD:
        return 6
    if head == KEYPOINTS:
        if not k or k < 1:
            raise ValueError("keypoint head needs the keypoint count")
        return 3 * k
    raise ValueError(f"unknown head {head!r}; choose from {', '.join(HEADS)}")


@dataclass
class EncoderModel:
    head: str
    k: int | None
    widths: tuple = (64, 128, 256)
    head_hidden: int = 128
    params: dict = field(default_factory=dict)

    @property
    def global_dim(self) -> int:
        return self.widths[-1]

    @property
    def out_dim(self) -> int:
        return head_output_size(self.head, self.k)

    @property
    def meta(self) -> dict:
        return {"head": self.head, "k": self.k, "widths": list(self.widths), "head_hidden": self.head_hidden}

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("point.")]

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.head, self.k, self.widths, self.head_hidden,
                            {n: p.copy() for n, p in self.params.items()})

    def save(self, path) -> None:
        ad.save_weights(path, self.params, self.meta)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        params, meta = ad.load_weights(path)
        model = cls(meta["head"], meta["k"], tuple(meta["widths"]), meta["head_hidden"])
        expected = model._shapes()
        for name, shape in expected.items():
            if name not in params:
                raise ValueError(f"{path}: missing tensor {name!r}")
            if params[name].shape != shape:
                raise ValueError(f"{path}: tensor {name!r} has shape {params[name].shape}, expected {shape}")
        model.params = {n: params[n] for n in expected}
        return model

    def _shapes(self) -> dict:
        shapes = {}
        fan_in = 3
        for i, w in enumerate(self.widths):
            shapes[f"point.{i}.weight"] = (fan_in, w)
            shapes[f"point.{i}.scale"] = (w,)
            shapes[f"point.{i}.shift"] = (w,)
            fan_in = w
        shapes.update(self._head_shapes())
        return shapes

    def _head_shapes(self) -> dict:
        return {
            "head.0.weight": (self.global_dim, self.head_hidden),
            "head.0.bias": (self.head_hidden,),
            "head.1.weight": (self.head_hidden, self.out_dim),
            "head.1.bias": (self.out_dim,),
        }


def _init_head(model: EncoderModel, rng: np.random.Generator, out_scale: float) -> dict:
    h = model.head_hidden
    return {
        "head.0.weight": rng.normal(0.0, np.sqrt(2.0 / model.global_dim), (model.global_dim, h)),
        "head.0.bias": np.zeros(h),
        # small output weights keep initial logits near zero
        "head.1.weight": rng.normal(0.0, out_scale / np.sqrt(h), (h, model.out_dim)),
        "head.1.bias": np.zeros(model.out_dim),
    }


def init_model(head: str, k: int | None, rng: np.random.Generator, widths=(64, 128, 256),
               head_hidden: int = 128, out_scale: float = 0.01) -> EncoderModel:
    """He-initialized backbone, unit scale / zero shift affine, small output layer."""
    model = EncoderModel(head, k, tuple(widths), head_hidden)
    head_output_size(head, k)  # validate before allocating
    params = {}
    fan_in = 3
    for i, w in enumerate(model.widths):
        params[f"point.{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, w))
        params[f"point.{i}.scale"] = np.ones(w)
        params[f"point.{i}.shift"] = np.zeros(w)
        fan_in = w
    params.update(_init_head(model, rng, out_scale))
    model.params = params
    return model


def replace_head(model: EncoderModel, head: str, k: int | None, rng: np.random.Generator,
                 out_scale: float = 0.01) -> EncoderModel:
    """Copy of ``model`` with its backbone weights and a freshly initialized head."""
    new = EncoderModel(head, k, model.widths, model.head_hidden)
    params = {n: model.params[n].copy() for n in model.backbone_names()}
    params.update(_init_head(new, rng, out_scale))
    new.params = params
    return new


def _check_input(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise ValueError(f"expected (B, N, 3) or (N, 3) points, got shape {pts.shape}")
    max_norm = np.sqrt((pts * pts).sum(axis=-1)).max()
    if max_norm > 1.0 + 1e-6:
        raise ValueError(f"input cloud is not normalized (max point norm {max_norm:.6g} > 1)")
    return pts


def forward(model: EncoderModel, points, tape: ad.Tape | None = None):
    """Run a batch through the network.

    Returns ``(global_feature, head_output, leaves)`` as tape variables, where
    ``leaves`` maps parameter names to their leaf nodes for gradient lookup.
    """
    tape = tape or ad.Tape()
    pts = _check_input(points)
    B, N, _ = pts.shape
    # per-point layers act on a flat (B*N, C) view; the weights are shared
    x = tape.leaf(pts.reshape(B * N, 3), needs_grad=False)
    leaves = {n: tape.leaf(p, n) for n, p in model.params.items()}
    for i in range(len(model.widths)):
        x = x @ leaves[f"point.{i}.weight"]
        x = ad.affine_relu(x, leaves[f"point.{i}.scale"], leaves[f"point.{i}.shift"])
    g = ad.max_over_points(ad.reshape(x, (B, N, model.global_dim)))
    h = ad.relu(g @ leaves["head.0.weight"] + leaves["head.0.bias"])
    out = h @ leaves["head.1.weight"] + leaves["head.1.bias"]
    return g, out, leaves


def extract_feature(model: EncoderModel, points) -> np.ndarray:
    """Global max-pooled feature of one cloud (or a batch); the head is skipped."""
    pts = _check_input(points)
    B, N, _ = pts.shape
    x = pts.reshape(B * N, 3)
    for i in range(len(model.widths)):
        x = x @ model.params[f"point.{i}.weight"]
        x = kernels.affine_relu(x, model.params[f"point.{i}.scale"], model.params[f"point.{i}.shift"])
    feat = kernels.max_over_points(x.reshape(B, N, model.global_dim))[0]
    return feat[0] if np.asarray(points).ndim == 2 else feat


def predict(model: EncoderModel, points) -> np.ndarray:
    """Head output for one cloud (or a batch)."""
    _, out, _ = forward(model, points)
    return out.value[0] if np.asarray(points).ndim == 2 else out.value
