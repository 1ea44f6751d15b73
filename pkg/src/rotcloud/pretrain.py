"""Rotation-prediction pretext training.

Three targets share one loop: the index of one of K canonical up-directions
(cross-entropy), an axis and angle (equal-weight L2), or the 6D column
representation mapped back to a rotation matrix (L2 on the matrix).

Randomness is keyed on ``(seed, purpose, ...)`` so that every sample's draw
depends only on its coordinates, never on scheduling. Each batch is split
into fixed-size micro-batches whose gradients are summed in index order,
which makes the result independent of the worker count.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .dirset import DirectionSet, build_direction_set, nearest_direction, rotations_for
from .pcdata import DatasetManifest, PointCloud
from .so3 import (
    UP,
    AxisAngle,
    apply_rotation,
    axis_angle_to_rotation,
    geodesic_distance,
    sample_axis_angle,
)

log = logging.getLogger(__name__)

# rng stream tags
_INIT, _ORDER, _SAMPLE, _SPLIT, _EVAL = range(5)


@dataclass
class TrainConfig:
    task: str = enc.CLASSIFY
    k: int | None = 18
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    num_points: int = 256
    holdout: float = 0.1
    eval_rotations: int = 4
    microbatch: int = 8
    threads: int = 1
    augment: bool = False
    widths: tuple = (64, 128, 256)
    head_hidden: int = 128
    up: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.up = tuple(float(u) for u in self.up)
        if len(self.up) != 3 or abs(math.hypot(*self.up) - 1.0) > 1e-6:
            raise ValueError(f"up must be a unit 3-vector, got {self.up}")
        for name in ("epochs", "batch_size", "num_points", "eval_rotations", "microbatch", "threads"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.holdout < 1:
            raise ValueError("holdout must be in [0, 1)")
        if self.task == enc.CLASSIFY and (self.k is None or self.k < 2):
            raise ValueError("classification needs k >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["up"] = list(self.up)
        return d


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, loss, metric)
    metric_name: str = "accuracy"
    skipped: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "metric"])
            for epoch, loss, metric in self.rows:
                w.writerow([epoch, repr(float(loss)), repr(float(metric))])


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed % 2**32, *key])


def subsample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(points) <= n:
        return points
    return points[np.sort(rng.choice(len(points), n, replace=False))]


def augment_points(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-axis scale and jitter, renormalized so the encoder accepts it."""
    from .pcdata import JITTER_SIGMA, SCALE_RANGE, normalize

    pts = points * rng.uniform(*SCALE_RANGE, size=3) + rng.normal(0.0, JITTER_SIGMA, points.shape)
    return normalize(PointCloud(pts)).points


# --------------------------------------------------------------------------
# samples


def make_classification_sample(pc, ds: DirectionSet, rng: np.random.Generator, rotations=None, up=UP):
    """Rotate a canonical cloud by a uniformly drawn label rotation."""
    if rotations is None:
        rotations = rotations_for(ds, up)
    label = int(rng.integers(ds.k))
    return apply_rotation(rotations[label], pc), label


def make_regression_sample(pc, rng: np.random.Generator):
    """Rotate a canonical cloud by a random axis (uniform) and angle (uniform in [0, pi])."""
    aa = sample_axis_angle(rng)
    r = axis_angle_to_rotation(aa)
    return apply_rotation(r, pc), aa, r


class _Task:
    """Target generation, loss and metric for one pretext head."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.up = np.asarray(config.up, dtype=np.float64)
        if config.task == enc.CLASSIFY:
            self.ds = build_direction_set(config.k)
            self.rotations = rotations_for(self.ds, self.up)

    def sample(self, points, rng):
        """Returns (rotated points, target) for one canonical cloud."""
        if self.config.task == enc.CLASSIFY:
            rotated, label = make_classification_sample(points, self.ds, rng, self.rotations)
            return rotated, label
        rotated, aa, r = make_regression_sample(points, rng)
        if self.config.task == enc.AXISANGLE:
            return rotated, np.concatenate([aa.axis, [aa.angle]])
        return rotated, r

    def loss(self, out: ad.Var, targets):
        """Mean loss over the micro-batch and the number of skipped samples."""
        task = self.config.task
        if task == enc.CLASSIFY:
            return ad.softmax_cross_entropy(out, np.asarray(targets)), 0
        t = np.asarray(targets)
        if task == enc.AXISANGLE:
            # equal weights on the axis and angle terms
            return ad.mse(out[:, :3], t[:, :3]) + ad.mse(out[:, 3], t[:, 3]), 0
        ok = ~degenerate_sixd(out.value)
        if not ok.any():
            return None, len(ok)
        rows = np.flatnonzero(ok)
        r = sixd_matrix(out[rows])
        return ad.mse(r, t[rows]) * (len(rows) / len(ok)), int((~ok).sum())

    def metric_name(self) -> str:
        return "accuracy" if self.config.task == enc.CLASSIFY else "geodesic_error"

    def score(self, outputs: np.ndarray, targets) -> float:
        """Accuracy for classification, mean geodesic error (rad) otherwise."""
        task = self.config.task
        if task == enc.CLASSIFY:
            pred = np.argmax(outputs, axis=1)
            return float(np.mean(pred == np.asarray(targets)))
        errs = []
        for o, t in zip(outputs, targets):
            if task == enc.AXISANGLE:
                r_pred = axis_angle_prediction_to_rotation(o)
                r_true = axis_angle_to_rotation(AxisAngle(t[:3], t[3]))
            else:
                if degenerate_sixd(o[None])[0]:
                    continue
                r_pred = sixd_matrix_np(o)
                r_true = t
            errs.append(geodesic_distance(r_pred, r_true))
        return float(np.mean(errs)) if errs else math.pi


def axis_angle_prediction_to_rotation(o: np.ndarray) -> np.ndarray:
    """Rotation from a raw 4-vector head output: normalized axis, angle clamped to [0, pi]."""
    axis = np.asarray(o[:3], dtype=np.float64)
    n = np.linalg.norm(axis)
    axis = axis / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
    return axis_angle_to_rotation(AxisAngle(axis, float(np.clip(o[3], 0.0, np.pi))))


def degenerate_sixd(v: np.ndarray) -> np.ndarray:
    a1, a2 = v[:, :3], v[:, 3:6]
    return (np.linalg.norm(a1, axis=1) <= 1e-9) | (np.linalg.norm(np.cross(a1, a2), axis=1) <= 1e-9)


def sixd_matrix_np(v: np.ndarray) -> np.ndarray:
    from .so3 import SixD, sixd_to_rotation

    return sixd_to_rotation(SixD(v[:3], v[3:6]))


def sixd_matrix(v: ad.Var) -> ad.Var:
    """Differentiable Gram-Schmidt map from (B, 6) to (B, 3, 3) rotation matrices."""
    B = v.shape[0]
    a1, a2 = v[:, 0:3], v[:, 3:6]
    c1 = a1 / ad.sqrt((a1 * a1).sum(axis=1, keepdims=True))
    u = a2 - (c1 * a2).sum(axis=1, keepdims=True) * c1
    c2 = u / ad.sqrt((u * u).sum(axis=1, keepdims=True))
    x1, y1, z1 = c1[:, 0:1], c1[:, 1:2], c1[:, 2:3]
    x2, y2, z2 = c2[:, 0:1], c2[:, 1:2], c2[:, 2:3]
    c3 = ad.concat([y1 * z2 - z1 * y2, z1 * x2 - x1 * z2, x1 * y2 - y1 * x2], axis=1)
    return ad.concat([c.reshape(B, 3, 1) for c in (c1, c2, c3)], axis=2)


# --------------------------------------------------------------------------
# training


def _as_points(data) -> list[np.ndarray]:
    if isinstance(data, DatasetManifest):
        data = data.load_all()
    return [d.points if isinstance(d, PointCloud) else np.asarray(d, dtype=np.float64) for d in data]


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, held-out) index split; held-out gets round(fraction * n) items."""
    perm = keyed_rng(seed, _SPLIT).permutation(n)
    n_hold = int(round(fraction * n)) if n > 1 else 0
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _grad_pass(model, task, pts, targets, loss_fn=None):
    tape = ad.Tape()
    _, out, leaves = enc.forward(model, pts, tape)
    loss, skipped = (loss_fn or task.loss)(out, targets)
    if loss is None:
        return 0.0, None, skipped
    tape.backward(loss)
    return float(loss.value), {n: leaves[n].grad for n in model.params}, skipped


def run_epochs(model, clouds, targets_for, loss_fn, config: TrainConfig, epoch_end=None,
               tag: int = 0, trainable=None):
    """Shared optimization loop.

    ``targets_for(index, rng)`` returns ``(points, target)`` for one training
    item; ``loss_fn(out, targets)`` returns ``(mean loss or None, skipped)``.
    Returns the optimizer (state) and per-epoch mean losses.
    """
    opt = ad.make_optimizer(config.optimizer, config.lr)
    names = list(model.params) if trainable is None else list(trainable)
    epoch_losses, skipped, seen = [], 0, 0
    n = len(clouds)
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        for epoch in range(1, config.epochs + 1):
            order = keyed_rng(config.seed, _ORDER, tag, epoch).permutation(n)
            total, count = 0.0, 0
            for b0 in range(0, n, config.batch_size):
                batch = order[b0:b0 + config.batch_size]
                items = [targets_for(int(i), keyed_rng(config.seed, _SAMPLE, tag, epoch, int(i))) for i in batch]
                chunks = [items[c:c + config.microbatch] for c in range(0, len(items), config.microbatch)]

                def work(chunk):
                    pts = np.stack([p for p, _ in chunk])
                    return _grad_pass(model, None, pts, [t for _, t in chunk], loss_fn)

                results = list(pool.map(work, chunks))
                grads = {nm: np.zeros_like(model.params[nm]) for nm in names}
                batch_loss = 0.0
                for chunk, (loss, g, sk) in zip(chunks, results):
                    w = len(chunk) / len(items)
                    skipped += sk
                    if g is None:
                        continue
                    batch_loss += w * loss
                    for nm in names:
                        grads[nm] += w * g[nm]
                seen += len(items)
                if not math.isfinite(batch_loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b0 // config.batch_size}")
                if skipped > 0.01 * seen:
                    raise FloatingPointError(
                        f"{skipped} of {seen} samples had degenerate 6D predictions (limit 1%)"
                    )
                opt.step(model.params, grads)
                total += batch_loss * len(items)
                count += len(items)
            epoch_losses.append(total / max(count, 1))
            if epoch_end is not None:
                epoch_end(epoch, epoch_losses[-1])
    return epoch_losses, skipped


def evaluate_pretext(model, clouds, config: TrainConfig, seed: int | None = None) -> float:
    """Held-out metric: each cloud is scored under ``eval_rotations`` seeded rotations."""
    task = _Task(config)
    seed = config.seed if seed is None else seed
    pts_list = _as_points(clouds)
    samples = []
    for i, pts in enumerate(pts_list):
        for r in range(config.eval_rotations):
            rng = keyed_rng(seed, _EVAL, i, r)
            samples.append(task.sample(subsample(pts, config.num_points, rng), rng))
    outputs = predict_batched(model, [s[0] for s in samples], config)
    return task.score(outputs, [s[1] for s in samples])


def predict_batched(model, clouds, config: TrainConfig) -> np.ndarray:
    chunks = [clouds[i:i + config.batch_size] for i in range(0, len(clouds), config.batch_size)]
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        outs = list(pool.map(lambda c: enc.predict(model, np.stack(c)), chunks))
    return np.concatenate(outs) if outs else np.zeros((0, model.out_dim))


def train_pretext(data, config: TrainConfig, heldout=None):
    """Train a rotation-prediction model on canonical clouds.

    ``data`` is a manifest or a list of clouds. Unless ``heldout`` is given,
    ``config.holdout`` of the clouds is set aside (seeded) and scored after
    every epoch. Returns ``(model, TrainLog)``.
    """
    clouds = _as_points(data)
    if heldout is None:
        tr, ho = holdout_split(len(clouds), config.holdout, config.seed)
        train_clouds = [clouds[i] for i in tr]
        heldout = [clouds[i] for i in ho]
    else:
        train_clouds, heldout = clouds, _as_points(heldout)
    if not train_clouds:
        raise ValueError("no training clouds")
    task = _Task(config)
    model = enc.init_model(config.task, config.k if config.task == enc.CLASSIFY else None,
                           keyed_rng(config.seed, _INIT), config.widths, config.head_hidden)
    train_log = TrainLog(metric_name=task.metric_name())

    def targets_for(i, rng):
        pts = subsample(train_clouds[i], config.num_points, rng)
        if config.augment:
            pts = augment_points(pts, rng)
        return task.sample(pts, rng)

    def epoch_end(epoch, loss):
        metric = evaluate_pretext(model, heldout, config) if heldout else float("nan")
        train_log.rows.append((epoch, loss, metric))
        log.info("epoch %d loss %.5f %s %.4f", epoch, loss, train_log.metric_name, metric)

    _, train_log.skipped = run_epochs(model, train_clouds, targets_for, task.loss, config, epoch_end)
    return model, train_log


def train_classifier(data, config: TrainConfig, heldout=None):
    config.task = enc.CLASSIFY
    return train_pretext(data, config, heldout)


def train_regressor_axis_angle(data, config: TrainConfig, heldout=None):
    config.task = enc.AXISANGLE
    return train_pretext(data, config, heldout)


def train_regressor_sixd(data, config: TrainConfig, heldout=None):
    config.task = enc.SIXD
    return train_pretext(data, config, heldout)


def initial_loss(model, clouds, config: TrainConfig) -> float:
    """Loss of ``model`` on the first training batch (no update)."""
    task = _Task(config)
    pts_list = _as_points(clouds)[: config.batch_size]
    items = []
    for i, p in enumerate(pts_list):
        rng = keyed_rng(config.seed, _SAMPLE, 0, 1, i)
        items.append(task.sample(subsample(p, config.num_points, rng), rng))
    tape = ad.Tape()
    _, out, _ = enc.forward(model, np.stack([p for p, _ in items]), tape)
    loss, _ = task.loss(out, [t for _, t in items])
    return float(loss.value)


def label_consistent(ds: DirectionSet, rotation: np.ndarray, label: int, up=UP) -> bool:
    """Does ``rotation`` send the up vector to direction ``label``?"""
    return nearest_direction(ds, np.asarray(rotation) @ np.asarray(up, dtype=np.float64)) == label
