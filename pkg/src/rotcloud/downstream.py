"""Frozen-feature transfer: feature extraction, a linear SVM, and label sweeps."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .pcdata import DatasetManifest


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    labels: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.rows) != len(self.labels):
            raise ValueError(f"feature rows {self.rows.shape} do not match {len(self.labels)} labels")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("feature matrix has non-finite entries")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def subset(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.rows[idx], self.labels[idx], self.source)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"f{j}" for j in range(self.dim)])
            for label, row in zip(self.labels, self.rows):
                w.writerow([int(label)] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path) -> "FeatureMatrix":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "label":
                raise ValueError(f"{path}: missing column 'label'")
            labels, rows = [], []
            for lineno, rec in enumerate(reader, 2):
                if len(rec) != len(header):
                    raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(rec)}")
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
        return cls(np.array(rows).reshape(len(rows), len(header) - 1), np.array(labels), str(path))


def extract_dataset_features(model: enc.EncoderModel, manifest: DatasetManifest, threads: int = 1,
                             clouds=None) -> FeatureMatrix:
    """One global feature per manifest entry, in manifest order. The model is not modified."""
    def one(i):
        try:
            pc = clouds[i] if clouds is not None else manifest.load_cloud(i)
        except (OSError, ValueError) as exc:
            raise type(exc)(f"{manifest.entries[i].path}: {exc}") from exc
        return enc.extract_feature(model, pc.points)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        rows = list(ex.map(one, range(len(manifest))))
    labels = [e.label for e in manifest.entries]
    return FeatureMatrix(np.array(rows).reshape(len(rows), model.global_dim), labels, "model")


def features_from_clouds(model: enc.EncoderModel, clouds, threads: int = 1) -> FeatureMatrix:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        rows = list(ex.map(lambda pc: enc.extract_feature(model, pc.points), clouds))
    return FeatureMatrix(np.array(rows), [pc.category for pc in clouds], "model")


def concat_features(fm1: FeatureMatrix, fm2: FeatureMatrix) -> FeatureMatrix:
    if len(fm1) != len(fm2):
        raise ValueError(f"sample counts differ: {len(fm1)} vs {len(fm2)}")
    bad = np.flatnonzero(fm1.labels != fm2.labels)
    if len(bad):
        raise ValueError(f"label mismatch at row {bad[0]}: {fm1.labels[bad[0]]} vs {fm2.labels[bad[0]]}")
    return FeatureMatrix(np.concatenate([fm1.rows, fm2.rows], axis=1), fm1.labels,
                         "+".join(s for s in (fm1.source, fm2.source) if s))


# --------------------------------------------------------------------------
# linear SVM


@dataclass
class LinearSVM:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    lam: float
    objective: list

    @property
    def num_classes(self) -> int:
        return len(self.bias)

    def decision(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, x) -> np.ndarray:
        # argmax picks the lowest class index on ties
        return np.argmax(self.decision(x), axis=1)

    def accuracy(self, fm: FeatureMatrix) -> float:
        return float(np.mean(self.predict(fm.rows) == fm.labels))


def _objective(W, b, X, Y, lam):
    margin = np.maximum(0.0, 1.0 - Y * (X @ W.T + b))
    return (margin * margin).sum() / len(X) + 0.5 * lam * (W * W).sum(), margin


def train_svm(fm: FeatureMatrix, lam: float = 1e-3, iters: int = 2000, seed: int = 0,
              num_classes: int | None = None) -> LinearSVM:
    """One-vs-rest squared-hinge linear SVM fitted by full-batch gradient descent.

    Features are standardized internally (the scaling is folded back into the
    returned weights). Each step backtracks until the objective does not
    increase, so the recorded objective is monotone. ``seed`` is accepted for
    interface symmetry; the solver starts from zero and is deterministic.
    """
    del seed
    C = num_classes or int(fm.labels.max()) + 1
    if len(np.unique(fm.labels)) < 2:
        raise ValueError("SVM training needs at least two classes")
    mu = fm.rows.mean(axis=0)
    sd = fm.rows.std(axis=0)
    sd[sd < 1e-12] = 1.0
    X = (fm.rows - mu) / sd
    N, D = X.shape
    Y = -np.ones((N, C))
    Y[np.arange(N), fm.labels] = 1.0
    W, b = np.zeros((C, D)), np.zeros(C)
    J, margin = _objective(W, b, X, Y, lam)
    history = [J]
    step = 1.0
    for _ in range(iters):
        coef = -2.0 * Y * margin / N
        gW = coef.T @ X + lam * W
        gb = coef.sum(axis=0)
        gnorm = (gW * gW).sum() + (gb * gb).sum()
        if gnorm < 1e-30:
            break
        step *= 2.0
        while True:
            W1, b1 = W - step * gW, b - step * gb
            J1, m1 = _objective(W1, b1, X, Y, lam)
            if J1 <= J - 0.5 * step * gnorm or step < 1e-20:
                break
            step *= 0.5
        if J1 > J:  # no progress possible at machine precision
            break
        W, b, J, margin = W1, b1, J1, m1
        history.append(J)
    W_raw = W / sd
    b_raw = b - W_raw @ mu
    return LinearSVM(W_raw, b_raw, lam, history)


def svm_accuracy(train: FeatureMatrix, test: FeatureMatrix, lam: float = 1e-3, iters: int = 2000) -> float:
    if train.dim != test.dim:
        raise ValueError(f"train features have {train.dim} columns but test features have {test.dim}")
    C = int(max(train.labels.max(), test.labels.max())) + 1
    return train_svm(train, lam, iters, num_classes=C).accuracy(test)


def stratified_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices holding round(fraction * n_c) random samples of each class."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = int(round(fraction * len(idx)))
        if n < 1:
            raise ValueError(f"fraction {fraction} leaves no samples of class {c} ({len(idx)} available)")
        chosen.append(idx if n == len(idx) else rng.choice(idx, n, replace=False))
    return np.sort(np.concatenate(chosen))


def label_efficiency_sweep(train: FeatureMatrix, test: FeatureMatrix, fractions, seed: int = 0,
                           lam: float = 1e-3, iters: int = 2000) -> list[tuple[float, float]]:
    """Test accuracy of SVMs fitted on stratified fractions of the training features."""
    curve = []
    for f in fractions:
        sub = train.subset(stratified_subset(train.labels, float(f), seed))
        curve.append((float(f), svm_accuracy(sub, test, lam, iters)))
    return curve


def write_curve(path, curve, header=("fraction", "accuracy")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for x, y in curve:
            w.writerow([repr(float(x)), repr(float(y))])
