"""Rotation math: Rodrigues construction, up-vector alignment, sampling, 6D maps.

Rotations are plain 3x3 float64 arrays. ``AxisAngle`` and ``SixD`` are small
frozen records so that the parameterizations stay explicit at call sites.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class AxisAngle:
    axis: np.ndarray
    angle: float

    def __post_init__(self):
        object.__setattr__(self, "axis", np.asarray(self.axis, dtype=np.float64).reshape(3))
        object.__setattr__(self, "angle", float(self.angle))


@dataclass(frozen=True)
class SixD:
    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a1", np.asarray(self.a1, dtype=np.float64).reshape(3))
        object.__setattr__(self, "a2", np.asarray(self.a2, dtype=np.float64).reshape(3))

    @classmethod
    def from_rotation(cls, r: np.ndarray) -> "SixD":
        r = np.asarray(r, dtype=np.float64)
        return cls(r[:, 0].copy(), r[:, 1].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2])


class DegenerateSixD(ValueError):
    """Raised when a 6D representation cannot be orthonormalized."""


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(np.abs(m.T @ m - np.eye(3)).max() <= tol and abs(np.linalg.det(m) - 1.0) <= tol)


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_rotation(aa: AxisAngle) -> np.ndarray:
    axis = aa.axis
    norm = np.linalg.norm(axis)
    if not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
        raise ValueError(f"rotation axis must be unit length, got norm {norm:.9g}")
    # renormalize so the output is orthonormal to machine precision
    k = axis / norm
    K = _skew(k)
    s, c = np.sin(aa.angle), np.cos(aa.angle)
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def _perpendicular(up: np.ndarray) -> np.ndarray:
    # part of the first standard basis vector not parallel to up that is
    # orthogonal to up; gives +x for up = +-y
    for e in np.eye(3):
        if np.linalg.norm(np.cross(up, e)) > 1e-6:
            p = e - (e @ up) * up
            return p / np.linalg.norm(p)
    raise ValueError("up vector is zero")


def rotation_from_up_to(target, up=UP) -> np.ndarray:
    """Minimal rotation taking ``up`` onto ``target``.

    When ``target == -up`` the result is a half-turn about a fixed
    perpendicular axis so that labels stay reproducible.
    """
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    for name, v in (("target", target), ("up", up)):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError(f"{name} must be a unit vector")
    target = target / np.linalg.norm(target)
    up = up / np.linalg.norm(up)
    c = float(np.clip(up @ target, -1.0, 1.0))
    axis = np.cross(up, target)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return axis_angle_to_rotation(AxisAngle(_perpendicular(up), np.pi))
    return axis_angle_to_rotation(AxisAngle(axis / s, np.arctan2(s, c)))


def sample_uniform_axis(rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the unit sphere via a normalized Gaussian draw."""
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n >= 1e-9:
            return v / n


def sample_axis_angle(rng: np.random.Generator) -> AxisAngle:
    """Uniform axis with an angle drawn uniformly from [0, pi]."""
    axis = sample_uniform_axis(rng)
    return AxisAngle(axis, rng.uniform(0.0, np.pi))


def sixd_to_rotation(s: SixD) -> np.ndarray:
    """Gram-Schmidt map from two raw columns to a rotation matrix."""
    a1, a2 = s.a1, s.a2
    n1 = np.linalg.norm(a1)
    if not np.isfinite(n1) or n1 <= 1e-9 or np.linalg.norm(np.cross(a1, a2)) <= 1e-9:
        raise DegenerateSixD("6D columns are zero or parallel")
    c1 = a1 / n1
    u = a2 - (a2 @ c1) * c1
    c2 = u / np.linalg.norm(u)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def rotation_to_axis_angle(r: np.ndarray) -> AxisAngle:
    r = np.asarray(r, dtype=np.float64)
    cos = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    # the antisymmetric part gives 2 sin(angle) * axis
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin2 = np.linalg.norm(w)
    angle = float(np.arctan2(sin2 / 2.0, cos))
    if sin2 < 1e-12 and cos > 0:
        return AxisAngle(np.array([0.0, 0.0, 1.0]), 0.0)
    if angle > np.pi / 2:
        # near pi the antisymmetric part vanishes; read the axis off R + I instead
        b = (r + r.T) / 2.0 - cos * np.eye(3)
        col = int(np.argmax(np.diag(b)))
        axis = b[:, col] / np.sqrt(max(b[col, col], 1e-300))
        if sin2 > 1e-12 and axis @ w < 0:
            axis = -axis
        axis = axis / np.linalg.norm(axis)
    else:
        axis = w / sin2
    return AxisAngle(axis, angle)


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation matrices."""
    m = np.asarray(r1).T @ np.asarray(r2)
    return float(np.arccos(np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)))


def apply_rotation(r: np.ndarray, pc):
    """Rotate every point of a cloud; count and row order are preserved.

    Accepts an (N, 3) array or a ``PointCloud`` (keypoints rotate along).
    """
    r = np.asarray(r, dtype=np.float64)
    if hasattr(pc, "points"):
        kp = None if pc.keypoints is None else pc.keypoints @ r.T
        return replace(pc, points=pc.points @ r.T, keypoints=kp)
    return np.asarray(pc, dtype=np.float64) @ r.T
