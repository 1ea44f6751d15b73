"""Keypoint regression fine-tuned from a pretext model, chamfer loss and PCK."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import kernels
from .pcdata import CATEGORIES, DatasetManifest, PointCloud, category_index
from .pretrain import TrainConfig, TrainLog, holdout_split, keyed_rng, run_epochs, subsample

log = logging.getLogger(__name__)

NUM_KEYPOINTS = 10
DEFAULT_CATEGORY = "cube"
DEFAULT_THRESHOLDS = tuple(round(0.01 * i, 2) for i in range(21))

# rng stream tags, disjoint from the pretext ones
_HEAD, _EVAL, _SUBSET = 20, 21, 22


def _point_set(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{what}: expected an (M, 3) point set, got shape {arr.shape}")
    if len(arr) == 0:
        raise ValueError(f"{what}: point set is empty")
    return np.ascontiguousarray(arr)


def chamfer(a, b) -> float:
    """Symmetric chamfer distance: mean squared nearest-neighbour distance both ways."""
    a, b = _point_set(a, "chamfer"), _point_set(b, "chamfer")
    _, da = kernels.nearest_neighbors(a, b)
    _, db = kernels.nearest_neighbors(b, a)
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(da) / len(da) + math.fsum(db) / len(db)


def snap_to_cloud(keypoints, points) -> np.ndarray:
    """Replace each keypoint by its nearest cloud point (lowest index on ties)."""
    kp = _point_set(keypoints, "snap_to_cloud keypoints")
    pts = _point_set(points, "snap_to_cloud cloud")
    idx, _ = kernels.nearest_neighbors(kp, pts)
    return pts[idx]


@dataclass(frozen=True)
class PCKCurve:
    thresholds: tuple
    values: tuple

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError("thresholds and values must be 1-D and the same length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly ascending")
        if np.any(v < 0) or np.any(v > 1) or np.any(np.diff(v) < 0):
            raise ValueError("PCK values must be non-decreasing and within [0, 1]")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "value"])
            for t, v in zip(self.thresholds, self.values):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def read_csv(cls, path) -> "PCKCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for col in ("threshold", "value"):
            if rows and col not in rows[0]:
                raise ValueError(f"{path}: missing column {col!r}")
        return cls(tuple(float(r["threshold"]) for r in rows), tuple(float(r["value"]) for r in rows))


def pck(predictions, ground_truth, thresholds=DEFAULT_THRESHOLDS) -> PCKCurve:
    """Fraction of (shape, keypoint) pairs whose index-matched error is <= each threshold."""
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} predictions for {len(ground_truth)} shapes")
    errors = []
    for sid, (p, g) in enumerate(zip(predictions, ground_truth)):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"shape {sid}: keypoint count mismatch ({p.shape} vs {g.shape})")
        errors.append(np.sqrt(((p - g) ** 2).sum(axis=1)))
    errors = np.concatenate(errors) if errors else np.zeros(0)
    t = tuple(float(x) for x in thresholds)
    if not errors.size:
        raise ValueError("pck needs at least one shape")
    values = tuple(float(np.count_nonzero(errors <= x)) / errors.size for x in t)
    return PCKCurve(t, values)


def dominance(a: PCKCurve, b: PCKCurve) -> float:
    """Share of thresholds where curve ``a`` is at or above curve ``b``."""
    if a.thresholds != b.thresholds:
        raise ValueError("curves use different thresholds")
    return float(np.mean(np.asarray(a.values) >= np.asarray(b.values)))


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class KeypointConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 3e-4  # fine-tuning rate, below the pretext default
    optimizer: str = "adam"
    seed: int = 0
    num_points: int = 256
    holdout: float = 0.1
    microbatch: int = 8
    threads: int = 1
    category: str | None = DEFAULT_CATEGORY
    num_keypoints: int = NUM_KEYPOINTS

    def __post_init__(self):
        if self.category is not None and self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}; choose from {', '.join(CATEGORIES)}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(task=enc.KEYPOINTS, k=None, epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr, optimizer=self.optimizer, seed=self.seed, num_points=self.num_points,
                           holdout=self.holdout, microbatch=self.microbatch, threads=self.threads)

    def to_dict(self) -> dict:
        return asdict(self)


def keypoint_clouds(data, category: str | None = DEFAULT_CATEGORY) -> list[PointCloud]:
    """Clouds that carry keypoints, restricted to one category unless ``category`` is None."""
    if isinstance(data, DatasetManifest):
        data = data.load_all()
    want = None if category is None else category_index(category)
    out = [pc for pc in data if want is None or pc.category == want]
    if not out:
        raise ValueError(f"no clouds of category {category!r}")
    for i, pc in enumerate(out):
        if pc.keypoints is None:
            raise ValueError(f"cloud {i} has no keypoints")
    return out


def _keypoint_model(init: enc.EncoderModel | None, clouds, config: KeypointConfig) -> enc.EncoderModel:
    rng = keyed_rng(config.seed, _HEAD)
    if init is None:
        model = enc.init_model(enc.KEYPOINTS, config.num_keypoints, rng)
    else:
        model = enc.replace_head(init, enc.KEYPOINTS, config.num_keypoints, rng)
    # start from the mean layout so each output slot begins near "its" landmark;
    # chamfer alone is order-free and would not keep the slots apart
    mean_kp = np.mean([pc.keypoints for pc in clouds], axis=0)
    model.params["head.1.bias"] = mean_kp.reshape(-1).copy()
    return model


def _chamfer_loss(k):
    def loss_fn(out, targets):
        pred = ad.reshape(out, (out.shape[0], k, 3))
        return ad.chamfer(pred, np.stack(targets)), 0
    return loss_fn


def predict_keypoints(model: enc.EncoderModel, clouds, num_points: int = 256, seed: int = 0,
                      snap: bool = False, threads: int = 1) -> np.ndarray:
    """(S, k, 3) regressed keypoints, optionally snapped to each full input cloud."""
    k = model.k

    def one(item):
        i, pc = item
        pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
        x = subsample(pts, num_points, keyed_rng(seed, _EVAL, i))
        kp = enc.predict(model, x).reshape(k, 3)
        return snap_to_cloud(kp, pts) if snap else kp

    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        preds = list(ex.map(one, enumerate(clouds)))
    return np.array(preds).reshape(len(preds), k, 3)


def mean_chamfer(model, clouds, config: KeypointConfig) -> float:
    preds = predict_keypoints(model, clouds, config.num_points, config.seed, threads=config.threads)
    return float(np.mean([chamfer(p, pc.keypoints) for p, pc in zip(preds, clouds)]))


def finetune_keypoints(init: enc.EncoderModel | None, data, config: KeypointConfig | None = None,
                       heldout=None):
    """Regress keypoints with a chamfer loss, starting from ``init``'s backbone.

    ``init=None`` gives the identically built random-init baseline. Unless
    ``heldout`` is given, ``config.holdout`` of the clouds is set aside and
    its mean chamfer is logged after every epoch. Returns ``(model, TrainLog)``.
    """
    config = config or KeypointConfig()
    clouds = keypoint_clouds(data, config.category)
    if heldout is None:
        tr, ho = holdout_split(len(clouds), config.holdout, config.seed)
        train_clouds, heldout = [clouds[i] for i in tr], [clouds[i] for i in ho]
    else:
        train_clouds, heldout = clouds, keypoint_clouds(heldout, config.category)
    if not train_clouds:
        raise ValueError("no training clouds")
    k = config.num_keypoints
    for i, pc in enumerate(train_clouds):
        if pc.keypoints.shape != (k, 3):
            raise ValueError(f"cloud {i} has {len(pc.keypoints)} keypoints, expected {k}")
    model = _keypoint_model(init, train_clouds, config)
    tc = config.train_config()
    train_log = TrainLog(metric_name="chamfer")

    def targets_for(i, rng):
        pc = train_clouds[i]
        return subsample(pc.points, config.num_points, rng), pc.keypoints

    def epoch_end(epoch, loss):
        metric = mean_chamfer(model, heldout, config) if heldout else float("nan")
        train_log.rows.append((epoch, loss, metric))
        log.info("epoch %d chamfer %.6f held-out %.6f", epoch, loss, metric)

    run_epochs(model, train_clouds, targets_for, _chamfer_loss(k), tc, epoch_end, tag=_HEAD)
    return model, train_log


def evaluate_pck(model, clouds, config: KeypointConfig | None = None, thresholds=DEFAULT_THRESHOLDS,
                 snap: bool = False) -> PCKCurve:
    config = config or KeypointConfig()
    clouds = keypoint_clouds(clouds, config.category)
    preds = predict_keypoints(model, clouds, config.num_points, config.seed, snap, config.threads)
    return pck(preds, [pc.keypoints for pc in clouds], thresholds)


def fraction_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    m = int(round(fraction * n))
    if m < 1:
        raise ValueError(f"fraction {fraction} of {n} shapes leaves nothing to train on")
    if m == n:
        return np.arange(n)
    return np.sort(keyed_rng(seed, _SUBSET).choice(n, m, replace=False))


def keypoint_label_sweep(init: enc.EncoderModel | None, train, test, fractions,
                         config: KeypointConfig | None = None, thresholds=DEFAULT_THRESHOLDS,
                         snap: bool = False) -> list[tuple[float, PCKCurve]]:
    """Fine-tune on random fractions of the training shapes; one test PCK curve each."""
    config = config or KeypointConfig()
    clouds = keypoint_clouds(train, config.category)
    test = keypoint_clouds(test, config.category)
    curves = []
    for f in fractions:
        subset = [clouds[i] for i in fraction_subset(len(clouds), float(f), config.seed)]
        model, _ = finetune_keypoints(init, subset, config)
        curves.append((float(f), evaluate_pck(model, test, config, thresholds, snap)))
    return curves
