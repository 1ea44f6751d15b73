"""Label direction sets on the sphere and the rotations they induce."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .so3 import UP, rotation_from_up_to

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0
GOLDEN_ANGLE = 2.0 * np.pi * (1.0 - 1.0 / GOLDEN_RATIO)

AXES6 = "Axes6"
AXES_BISECTORS18 = "AxesBisectors18"
ICOSA32 = "Icosa32"
SUNFLOWER = "Sunflower"


@dataclass(frozen=True)
class DirectionSet:
    k: int
    dirs: np.ndarray
    scheme: str

    def __len__(self):
        return self.k


def _axes() -> np.ndarray:
    return np.concatenate([np.eye(3), -np.eye(3)])[[0, 3, 1, 4, 2, 5]]


def _bisectors() -> np.ndarray:
    axes = _axes()
    out = []
    for i, j in itertools.combinations(range(6), 2):
        s = axes[i] + axes[j]
        if np.linalg.norm(s) < 1e-12:  # antipodal pair
            continue
        out.append(s / np.linalg.norm(s))
    return np.array(out)


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm vertices of the regular icosahedron and its 20 faces."""
    phi = GOLDEN_RATIO
    verts = []
    for a, b in itertools.product((-1.0, 1.0), repeat=2):
        verts += [(0.0, a, b * phi), (a, b * phi, 0.0), (b * phi, 0.0, a)]
    verts = np.array(verts)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    # faces are the triples of mutually adjacent vertices (edge = min distance)
    d = np.linalg.norm(verts[:, None] - verts[None], axis=2)
    edge = d[d > 1e-9].min()
    adj = np.abs(d - edge) < 1e-9
    faces = [
        (i, j, k)
        for i, j, k in itertools.combinations(range(12), 3)
        if adj[i, j] and adj[j, k] and adj[i, k]
    ]
    return verts, np.array(faces)


def _icosa32() -> np.ndarray:
    verts, faces = icosahedron()
    centers = verts[faces].mean(axis=1)
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    return np.concatenate([verts, centers])


def sunflower(k: int) -> np.ndarray:
    """Golden-spiral points with latitudes offset half a step from the poles."""
    i = np.arange(k, dtype=np.float64)
    y = 1.0 - (2.0 * i + 1.0) / k
    r = np.sqrt(np.clip(1.0 - y * y, 0.0, None))
    theta = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def build_direction_set(k: int) -> DirectionSet:
    k = int(k)
    if k < 2:
        raise ValueError(f"need at least 2 directions, got k={k}")
    if k == 6:
        return DirectionSet(6, _axes(), AXES6)
    if k == 18:
        return DirectionSet(18, np.concatenate([_axes(), _bisectors()]), AXES_BISECTORS18)
    if k == 32:
        return DirectionSet(32, _icosa32(), ICOSA32)
    return DirectionSet(k, sunflower(k), SUNFLOWER)


def rotations_for(ds: DirectionSet, up=UP) -> np.ndarray:
    """(K, 3, 3) stack; rotation i takes ``up`` to ``ds.dirs[i]``."""
    return np.stack([rotation_from_up_to(d, up) for d in ds.dirs])


def nearest_direction(ds: DirectionSet, v) -> int:
    # argmax keeps the lowest index on ties
    return int(np.argmax(ds.dirs @ np.asarray(v, dtype=np.float64)))


def min_pairwise_angle(dirs: np.ndarray) -> float:
    g = np.clip(dirs @ dirs.T, -1.0, 1.0)
    np.fill_diagonal(g, -1.0)
    return float(np.arccos(g.max()))


def write_csv(ds: DirectionSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "z"])
        for i, (x, y, z) in enumerate(ds.dirs):
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z))])
