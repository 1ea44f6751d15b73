"""Point clouds, meshes, synthetic shapes and dataset manifests.

Synthetic categories are built as triangle meshes in a canonical pose (up is
+y, front is +z) and turned into clouds with area-weighted surface sampling,
so external OFF/OBJ meshes and generated shapes go through the same path.
Every category carries an up and a front cue (openings, fins, an oblique
apex), which makes its canonical pose recoverable from the points alone.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CATEGORIES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "capsule", "plate")
JITTER_SIGMA = 0.01
SCALE_RANGE = (0.8, 1.2)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    category: int | None = None
    keypoints: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be an (N>=1, 3) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.keypoints is not None:
            kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
            object.__setattr__(self, "keypoints", kp)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError(f"face index out of range for {len(v)} vertices")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("mesh has a degenerate face with repeated vertex indices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def normalize_transform(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Centroid and scale that :func:`normalize` would apply."""
    centroid = points.mean(axis=0)
    scale = np.linalg.norm(points - centroid, axis=1).max()
    if not scale > 0:
        raise ValueError("cannot normalize a cloud whose points are all identical")
    return centroid, float(scale)


def normalize(pc: PointCloud) -> PointCloud:
    """Center on the centroid and scale the furthest point to unit distance."""
    centroid, scale = normalize_transform(pc.points)
    pts = (pc.points - centroid) / scale
    kp = None if pc.keypoints is None else (pc.keypoints - centroid) / scale
    return replace(pc, points=pts, keypoints=kp)


def sample_mesh(m: Mesh, n: int, rng: np.random.Generator, return_faces: bool = False):
    """Uniform surface samples: faces drawn proportionally to area."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    areas = m.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total surface area")
    cum = np.cumsum(areas)
    face = np.searchsorted(cum, rng.random(n) * total, side="right")
    face = np.minimum(face, len(areas) - 1)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    tri = m.vertices[m.faces[face]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    pc = PointCloud(pts)
    if return_faces:
        return pc, face
    return pc


# --------------------------------------------------------------------------
# mesh files


class MeshParseError(ValueError):
    pass


def _tokens(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _floats(path, lineno, toks):
    try:
        return [float(t) for t in toks]
    except ValueError:
        raise MeshParseError(f"{path}:{lineno}: non-numeric token in {' '.join(toks)!r}") from None


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _check_faces(path, faces_with_lines, nverts):
    faces = []
    for lineno, tri in faces_with_lines:
        for idx in tri:
            if idx < 0 or idx >= nverts:
                raise MeshParseError(f"{path}:{lineno}: face index {idx} out of range [0, {nverts})")
        if len(set(tri)) < 3:
            log.warning("%s:%d: dropping degenerate face %s", path, lineno, tri)
            continue
        faces.append(tri)
    return faces


def load_off(path) -> Mesh:
    it = _tokens(path)
    try:
        lineno, toks = next(it)
    except StopIteration:
        raise MeshParseError(f"{path}:1: empty file") from None
    if not toks[0].upper().endswith("OFF"):
        raise MeshParseError(f"{path}:{lineno}: missing OFF header")
    counts = toks[1:]
    if not counts:
        try:
            lineno, counts = next(it)
        except StopIteration:
            raise MeshParseError(f"{path}:{lineno}: missing vertex/face counts") from None
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise MeshParseError(f"{path}:{lineno}: malformed counts line") from None
    verts = []
    for _ in range(nv):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise MeshParseError(f"{path}:{lineno}: expected {nv} vertices, file ended") from None
        xyz = _floats(path, lineno, toks)
        if len(xyz) < 3:
            raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
        verts.append(xyz[:3])
    tris = []
    for _ in range(nf):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise MeshParseError(f"{path}:{lineno}: expected {nf} faces, file ended") from None
        try:
            vals = [int(t) for t in toks]
        except ValueError:
            raise MeshParseError(f"{path}:{lineno}: non-numeric token in face") from None
        k = vals[0]
        if k < 3 or len(vals) < k + 1:
            raise MeshParseError(f"{path}:{lineno}: malformed face")
        tris += [(lineno, t) for t in _fan(vals[1:k + 1])]
    faces = _check_faces(path, tris, nv)
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_obj(path) -> Mesh:
    verts = []
    tris = []
    for lineno, toks in _tokens(path):
        if toks[0] == "v":
            xyz = _floats(path, lineno, toks[1:])
            if len(xyz) < 3:
                raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            verts.append(xyz[:3])
        elif toks[0] == "f":
            poly = []
            for t in toks[1:]:
                try:
                    idx = int(t.split("/")[0])
                except ValueError:
                    raise MeshParseError(f"{path}:{lineno}: non-numeric face token {t!r}") from None
                # OBJ is 1-based; negative indices count back from the newest vertex
                poly.append(idx - 1 if idx > 0 else len(verts) + idx)
            if len(poly) < 3:
                raise MeshParseError(f"{path}:{lineno}: face needs at least 3 vertices")
            tris += [(lineno, t) for t in _fan(poly)]
    faces = _check_faces(path, tris, len(verts))
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".off":
        return load_off(path)
    if suffix == ".obj":
        return load_obj(path)
    raise MeshParseError(f"{path}: unsupported mesh format {suffix!r}")


# --------------------------------------------------------------------------
# synthetic shapes


def _grid(fn, nu, nv, keep=None, wrap_u=False):
    """Triangulate a parametric patch fn(u, v) over [0,1]^2."""
    us = np.linspace(0.0, 1.0, nu + 1)
    vs = np.linspace(0.0, 1.0, nv + 1)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    verts = fn(uu.ravel(), vv.ravel())
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    tri = verts[faces]
    area = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    ok = area > 1e-12
    if keep is not None:
        ok &= keep(tri.mean(axis=1))
    return verts, faces[ok]


def _merge(*parts):
    verts, faces, off = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def _disk(y, radius, center=(0.0, 0.0), n=32):
    def fn(u, v):
        t = 2 * np.pi * u
        r = radius * v
        return np.stack([center[0] + r * np.cos(t), np.full_like(u, y), center[1] + r * np.sin(t)], 1)
    return _grid(fn, n, 4)


def _quad(p0, pu, pv, n=8, keep=None):
    p0, pu, pv = (np.asarray(p, dtype=np.float64) for p in (p0, pu, pv))
    return _grid(lambda u, v: p0 + u[:, None] * pu + v[:, None] * pv, n, n, keep)


def _sphere_holes():
    # three caps whose first moments cancel, so the shell stays centered
    w0, w1 = np.sin(np.radians(30)) ** 2, np.sin(np.radians(20)) ** 2
    u2 = np.array([0.0, w0, -w1]) / np.hypot(w0, w1)
    w2 = np.hypot(w0, w1)
    return [
        (np.array([0.0, -1.0, 0.0]), np.cos(np.radians(30))),
        (np.array([0.0, 0.0, 1.0]), np.cos(np.radians(20))),
        (u2, np.sqrt(1.0 - w2)),
    ]


def _mesh_sphere():
    holes = _sphere_holes()

    def fn(u, v):
        t, p = 2 * np.pi * u, np.pi * v
        return np.stack([np.sin(p) * np.cos(t), np.cos(p), np.sin(p) * np.sin(t)], 1)

    def keep(c):
        d = c / np.linalg.norm(c, axis=1, keepdims=True)
        ok = np.ones(len(c), bool)
        for axis, cos in holes:
            ok &= d @ axis < cos
        return ok

    mesh = _merge(_grid(fn, 64, 32, keep))
    kp = [h[0] for h in holes] + [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, 0, -1),
                                  (0.6, 0.0, 0.8), (-0.6, 0.0, 0.8), (0, -0.6, -0.8)]
    return mesh, np.array(kp, dtype=np.float64)


def _mesh_cube():
    # open top; the front wall only reaches half height
    parts = [
        _quad((-1, -1, -1), (2, 0, 0), (0, 0, 2)),  # bottom
        _quad((-1, -1, -1), (0, 2, 0), (0, 0, 2)),  # left
        _quad((1, -1, -1), (0, 2, 0), (0, 0, 2)),  # right
        _quad((-1, -1, -1), (2, 0, 0), (0, 2, 0)),  # back
        _quad((-1, -1, 1), (2, 0, 0), (0, 1, 0)),  # front, half height
    ]
    corners = [(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
    return _merge(*parts), np.array(corners + [(0, -1, 0), (0, 1, 0)], dtype=np.float64)


def _mesh_cylinder():
    r = 0.6

    def wall(u, v):
        t = 2 * np.pi * u
        return np.stack([r * np.cos(t), -1 + 2 * v, r * np.sin(t)], 1)

    parts = [
        _grid(wall, 48, 12),
        _disk(-1.0, r),
        _quad((0, -0.5, r), (0, 0, 0.4), (0, 1.0, 0)),  # fin on the front
    ]
    kp = [(r, 1, 0), (-r, 1, 0), (0, 1, r), (0, 1, -r),
          (r, -1, 0), (-r, -1, 0), (0, -1, r), (0, -1, -r),
          (0, 0.5, r + 0.4), (0, -0.5, r + 0.4)]
    return _merge(*parts), np.array(kp, dtype=np.float64)


def _mesh_cone():
    r, apex = 0.8, np.array([0.0, 1.0, 0.4])  # apex leans to the front

    def side(u, v):
        t = 2 * np.pi * u
        base = np.stack([r * np.cos(t), -np.ones_like(u), r * np.sin(t)], 1)
        return base + v[:, None] * (apex - base)

    parts = [_grid(side, 48, 12), _disk(-1.0, r)]
    t = 2 * np.pi * np.arange(8) / 8
    rim = np.stack([r * np.cos(t), -np.ones(8), r * np.sin(t)], 1)
    return _merge(*parts), np.concatenate([[apex, (0, -1, 0)], rim])


def _mesh_torus():
    big, small, gap = 0.8, 0.3, np.radians(60)

    def fn(u, v):
        # azimuth skips a gap centred on the back (-z); only the upper half tube
        t = -np.pi / 2 + gap / 2 + u * (2 * np.pi - gap)
        p = np.pi * v
        rr = big + small * np.cos(p)
        return np.stack([rr * np.cos(t), small * np.sin(p), rr * np.sin(t)], 1)

    mesh = _merge(_grid(fn, 64, 12))
    t = -np.pi / 2 + gap / 2 + np.linspace(0, 1, 10) * (2 * np.pi - gap)
    kp = np.stack([big * np.cos(t), np.full(10, small), big * np.sin(t)], 1)
    return mesh, kp


def _mesh_pyramid():
    apex = np.array([0.0, 1.0, 0.5])
    base = np.array([(-1, -1, -1), (1, -1, -1), (1, -1, 1), (-1, -1, 1)], dtype=np.float64)
    parts = [_quad(base[0], (2, 0, 0), (0, 0, 2))]
    for i in range(4):
        a, b = base[i], base[(i + 1) % 4]
        parts.append(_grid(lambda u, v, a=a, b=b: (a + u[:, None] * (b - a)) * (1 - v[:, None])
                           + v[:, None] * apex, 8, 8))
    kp = np.concatenate([[apex, (0, -1, 0)], base, (base + apex) / 2])
    return _merge(*parts), kp


def _mesh_capsule():
    r, top = 0.5, 0.5

    def wall(u, v):
        t = 2 * np.pi * u
        return np.stack([r * np.cos(t), -1 + (top + 1) * v, r * np.sin(t)], 1)

    def window(c):
        return ~((c[:, 2] > 0) & (np.abs(c[:, 0]) < 0.25) & (c[:, 1] > -0.5) & (c[:, 1] < 0.1))

    def dome(u, v):
        t, p = 2 * np.pi * u, 0.5 * np.pi * v
        return np.stack([r * np.sin(p) * np.cos(t), top + r * np.cos(p), r * np.sin(p) * np.sin(t)], 1)

    parts = [_grid(wall, 48, 24, window), _grid(dome, 48, 8), _disk(-1.0, r)]
    ring = [(r, 0, 0), (-r, 0, 0), (0, 0, r), (0, 0, -r)]
    kp = [(0, top + r, 0), (0, -1, 0)] + [(x, -1, z) for x, _, z in ring] + [(x, top, z) for x, _, z in ring]
    return _merge(*parts), np.array(kp, dtype=np.float64)


def _mesh_plate():
    h = 0.3  # rim on left, right and back; open at the front
    parts = [
        _quad((-1, 0, -1), (2, 0, 0), (0, 0, 2), n=12),
        _quad((-1, 0, -1), (0, h, 0), (0, 0, 2)),
        _quad((1, 0, -1), (0, h, 0), (0, 0, 2)),
        _quad((-1, 0, -1), (2, 0, 0), (0, h, 0)),
    ]
    kp = [(-1, 0, -1), (1, 0, -1), (1, 0, 1), (-1, 0, 1), (0, 0, 0),
          (-1, h, -1), (1, h, -1), (-1, h, 1), (1, h, 1), (0, h, -1)]
    return _merge(*parts), np.array(kp, dtype=np.float64)


_BUILDERS = {
    "sphere": _mesh_sphere,
    "cube": _mesh_cube,
    "cylinder": _mesh_cylinder,
    "cone": _mesh_cone,
    "torus": _mesh_torus,
    "pyramid": _mesh_pyramid,
    "capsule": _mesh_capsule,
    "plate": _mesh_plate,
}
_MESH_CACHE: dict = {}


def canonical_mesh(category: str) -> tuple[Mesh, np.ndarray]:
    """Canonical mesh and its 10 landmark keypoints for a synthetic category."""
    if category not in _BUILDERS:
        raise ValueError(f"unknown category {category!r}; choose from {', '.join(CATEGORIES)}")
    if category not in _MESH_CACHE:
        _MESH_CACHE[category] = _BUILDERS[category]()
    return _MESH_CACHE[category]


def category_index(category) -> int:
    if isinstance(category, (int, np.integer)):
        if not 0 <= category < len(CATEGORIES):
            raise ValueError(f"unknown category index {category}")
        return int(category)
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; choose from {', '.join(CATEGORIES)}")
    return CATEGORIES.index(category)


def generate_shape(category, n: int, rng: np.random.Generator) -> PointCloud:
    """Normalized surface sample of a synthetic shape in canonical pose.

    Each axis is stretched by an independent factor from ``SCALE_RANGE``
    (the sphere uses one shared factor so it stays round), points get
    Gaussian jitter of ``JITTER_SIGMA``, and the result is normalized.
    Keypoints follow the same stretch and normalization, without jitter.
    """
    if n < 64:
        raise ValueError(f"need at least 64 points, got {n}")
    label = category_index(category)
    name = CATEGORIES[label]
    mesh, kp = canonical_mesh(name)
    if name == "sphere":
        scale = np.full(3, rng.uniform(*SCALE_RANGE))
    else:
        scale = rng.uniform(*SCALE_RANGE, size=3)
    mesh = Mesh(mesh.vertices * scale, mesh.faces)
    pts = sample_mesh(mesh, n, rng).points
    pts = pts + rng.normal(0.0, JITTER_SIGMA, size=pts.shape)
    return normalize(PointCloud(pts, label, kp * scale))


# --------------------------------------------------------------------------
# files and manifests


def save_xyz(path, points) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.17g")


def load_xyz(path) -> np.ndarray:
    try:
        pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return pts


@dataclass(frozen=True)
class Entry:
    path: str
    label: int
    keypoints: str | None = None


@dataclass
class DatasetManifest:
    entries: list[Entry]
    split: str
    seed: int
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest lists the same file more than once")
        labels = sorted({e.label for e in self.entries})
        if labels and labels != list(range(len(labels))):
            raise ValueError(f"category labels must form 0..C-1, got {labels}")

    def __len__(self):
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return max((e.label for e in self.entries), default=-1) + 1

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "split": self.split,
            "entries": [{"path": e.path, "label": e.label, "keypoints": e.keypoints} for e in self.entries],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            raw = json.load(fh)
        entries = [Entry(e["path"], int(e["label"]), e.get("keypoints")) for e in raw["entries"]]
        return cls(entries, raw["split"], int(raw["seed"]), Path(path).parent)

    def load_cloud(self, i: int) -> PointCloud:
        e = self.entries[i]
        pts = load_xyz(self.root / e.path)
        kp = load_xyz(self.root / e.keypoints) if e.keypoints else None
        return PointCloud(pts, e.label, kp)

    def load_all(self, threads: int = 1) -> list[PointCloud]:
        with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
            return list(ex.map(self.load_cloud, range(len(self))))


def load_split(data_dir, split: str) -> DatasetManifest:
    path = Path(data_dir) / f"{split}.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return DatasetManifest.load(path)


TEST_SEED_OFFSET = 1_000_000


def entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed + index)


def generate_split(categories: int, count: int, points: int, seed: int) -> list[PointCloud]:
    """``count`` clouds per category, interleaved by category; deterministic per entry."""
    def make(i):
        return generate_shape(i % categories, points, entry_rng(seed, i))
    return [make(i) for i in range(categories * count)]


def gen_dataset(out, categories: int = 8, train: int = 200, test: int = 50,
                points: int = 1024, seed: int = 0, threads: int = 1) -> dict[str, DatasetManifest]:
    if not 2 <= categories <= len(CATEGORIES):
        raise ValueError(f"categories must be in [2, {len(CATEGORIES)}]")
    out = Path(out)
    manifests = {}
    for split, count, split_seed in (("train", train, seed), ("test", test, seed + TEST_SEED_OFFSET)):
        os.makedirs(out / split, exist_ok=True)

        def write(i, split=split, split_seed=split_seed):
            pc = generate_shape(i % categories, points, entry_rng(split_seed, i))
            rel = f"{split}/{i:06d}.xyz"
            kp_rel = f"{split}/{i:06d}.kp.xyz"
            save_xyz(out / rel, pc.points)
            save_xyz(out / kp_rel, pc.keypoints)
            return Entry(rel, pc.category, kp_rel)

        with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
            entries = list(ex.map(write, range(categories * count)))
        m = DatasetManifest(entries, split, split_seed, out)
        m.save(out / f"{split}.json")
        manifests[split] = m
    return manifests
