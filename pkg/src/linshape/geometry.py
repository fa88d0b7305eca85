"""Point-cloud primitives: Chamfer distance, affine maps, surface sampling,
k-means++ seeding and random z-rotations."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import InvalidInputError

# Below this size the KD-tree costs more than it saves.
BRUTE_FORCE_MAX = 64


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    class_id: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"points must have shape (M, 3), got {pts.shape}")
        if len(pts) < 1:
            raise InvalidInputError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise InvalidInputError("point cloud has non-finite coordinates")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(pts):
                raise InvalidInputError(f"{len(lab)} labels for {len(pts)} points")
            self.labels = lab

    def __len__(self):
        return len(self.points)

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, None if self.labels is None else self.labels.copy(), self.class_id)


@dataclass
class AffineTransform:
    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.linear.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidInputError(f"need a (3, 3) linear part and (3,) translation, got "
                                    f"{self.linear.shape} and {self.translation.shape}")
        if not (np.isfinite(self.linear).all() and np.isfinite(self.translation).all()):
            raise InvalidInputError("affine transform has non-finite entries")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face index out of range")
        if not np.isfinite(self.vertices).all():
            raise InvalidInputError("mesh has non-finite vertices")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def as_points(x) -> np.ndarray:
    """Coordinates of a PointCloud or array-like as a validated (M, 3) array."""
    if isinstance(x, PointCloud):
        return x.points
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"expected (M, 3) points, got shape {pts.shape}")
    if len(pts) == 0:
        raise InvalidInputError("point cloud is empty")
    if not np.isfinite(pts).all():
        raise InvalidInputError("point cloud has non-finite coordinates")
    return pts


def affine_points(linear, translation, pts):
    """``linear @ p + translation`` for every point, written out per axis.

    Works for one transform ``(3, 3)``/``(3,)`` or a batch ``(B, 3, 3)``/
    ``(B, 3)``; points are ``(M, 3)`` or ``(B, M, 3)``.  The expression is
    shared with the differentiable graph so both give identical bits.
    """
    L = np.asarray(linear)
    t = np.asarray(translation)
    if L.ndim == 3:
        L = L[:, None]
        t = t[:, None]
    cols = []
    for j in range(3):
        cols.append(L[..., j, 0] * pts[..., 0] + L[..., j, 1] * pts[..., 1] + L[..., j, 2] * pts[..., 2] + t[..., j])
    return np.stack(cols, axis=-1)


def chamfer_with_correspondence(x, y):
    """Chamfer distance plus nearest-neighbour indices in both directions.

    Ties go to the lowest index.
    """
    a, b = as_points(x), as_points(y)
    da, ia, db, ib = kernels.batch_nn(a, b)
    return float(np.mean(da[0]) + np.mean(db[0])), ia[0], ib[0]


def chamfer(x, y) -> float:
    """Symmetric Chamfer distance: mean squared nearest-neighbour distance
    from x to y plus the same from y to x."""
    return chamfer_with_correspondence(x, y)[0]


def _nn_sqdist_tree(a, b):
    _, idx = cKDTree(b).query(a, k=1)
    diff = a - b[idx]
    return diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]


def chamfer_indexed(x, y) -> float:
    """KD-tree accelerated Chamfer distance, same value as :func:`chamfer`."""
    a, b = as_points(x), as_points(y)
    if len(a) <= BRUTE_FORCE_MAX and len(b) <= BRUTE_FORCE_MAX:
        return chamfer(a, b)
    return float(np.mean(_nn_sqdist_tree(a, b)) + np.mean(_nn_sqdist_tree(b, a)))


def apply_transform(T: AffineTransform, x):
    if isinstance(x, PointCloud):
        return x.with_points(affine_points(T.linear, T.translation, x.points))
    return affine_points(T.linear, T.translation, as_points(x))


def sample_mesh_surface(mesh: TriMesh, M: int, rng: np.random.Generator) -> PointCloud:
    """Draw ``M`` points uniformly (by area) on the mesh surface."""
    areas = mesh.triangle_areas() if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not np.isfinite(total) or total <= 0:
        raise InvalidInputError("mesh has no non-degenerate triangle")
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    tri = rng.choice(len(areas), size=M, p=areas / total)
    u = rng.random(M)
    v = rng.random(M)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    corners = mesh.vertices[mesh.faces[tri]]
    pts = corners[:, 0] + u[:, None] * (corners[:, 1] - corners[:, 0]) + v[:, None] * (corners[:, 2] - corners[:, 0])
    return PointCloud(pts)


def seeding_probabilities(dists) -> np.ndarray:
    d = np.asarray(dists, dtype=np.float64)
    total = d.sum()
    if total <= 0:
        return np.full(len(d), 1.0 / len(d))
    return d / total


def kmeanspp_seed(dataset, K: int, rng: np.random.Generator) -> list:
    """k-means++ seeding under the Chamfer distance; returns deep copies."""
    n = len(dataset)
    if K < 1 or K > n:
        raise InvalidInputError(f"cannot seed K={K} prototypes from {n} samples")
    pts = [as_points(x) for x in dataset]
    chosen = [int(rng.integers(n))]
    nearest = np.array([chamfer(p, pts[chosen[0]]) for p in pts])
    while len(chosen) < K:
        probs = seeding_probabilities(nearest)
        if nearest.sum() <= 0:
            # everything coincides with a seed: fall back to uniform over the rest
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=probs))
        chosen.append(nxt)
        nearest = np.minimum(nearest, [chamfer(p, pts[nxt]) for p in pts])
    return [copy.deepcopy(dataset[i]) for i in chosen]


def z_rotation(angle: float) -> AffineTransform:
    c, s = np.cos(angle), np.sin(angle)
    return AffineTransform(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))


def random_z_rotation(x, rng: np.random.Generator, angle: float | None = None):
    """Rotate about the z axis by an angle drawn uniformly in [0, 2*pi)."""
    if angle is None:
        angle = rng.uniform(0.0, 2 * np.pi)
    return apply_transform(z_rotation(angle), x)


def normalize_points(pts: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale to unit max radius."""
    centered = pts - pts.mean(axis=0)
    r = np.sqrt((centered * centered).sum(axis=1)).max()
    return centered / r if r > 0 else centered
