"""Desk-scale synthetic datasets with ground truth for oracle checks."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from ..geometry import PointCloud, TriMesh, affine_points, sample_mesh_surface, z_rotation
from ..netheads import TransformFamily, decode_transform

KINDS = ("cluster-mixture", "affine-orbit", "linear-family-1d", "linear-family-2d", "two-part-labeled")


# ------------------------------------------------------------ base shapes
def _box_mesh(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    V = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    F = [(a, b, c) for a, b, c, d in quads] + [(a, c, d) for a, b, c, d in quads]
    return TriMesh(V, np.array(F))


def _merge(*meshes):
    V, F, off = [], [], 0
    for m in meshes:
        V.append(m.vertices)
        F.append(m.faces + off)
        off += len(m.vertices)
    return TriMesh(np.concatenate(V), np.concatenate(F))


def _box(M, rng):
    return sample_mesh_surface(_box_mesh([-0.6, -0.3, -0.15], [0.6, 0.3, 0.15]), M, rng).points


def _cross(M, rng):
    m = _merge(_box_mesh([-0.7, -0.12, -0.12], [0.7, 0.12, 0.12]), _box_mesh([0.1, -0.45, -0.12], [0.34, 0.45, 0.12]))
    return sample_mesh_surface(m, M, rng).points


def _ellipsoid(M, rng):
    d = rng.normal(size=(M, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * np.array([0.7, 0.35, 0.2])


def _torus(M, rng):
    # ring in the x-z plane, so a rotation about z changes it
    u = rng.uniform(0, 2 * np.pi, M)
    v = rng.uniform(0, 2 * np.pi, M)
    R, r = 0.55, 0.15
    return np.stack([(R + r * np.cos(v)) * np.cos(u), r * np.sin(v), (R + r * np.cos(v)) * np.sin(u)], axis=1)


def _cone(M, rng):
    # apex at +x, base disk at -x
    L, rad = 1.2, 0.35
    side = np.pi * rad * np.hypot(L, rad)
    disk = np.pi * rad * rad
    n_side = rng.binomial(M, side / (side + disk))
    h = np.sqrt(rng.uniform(0, 1, n_side))          # area-uniform along the cone
    a = rng.uniform(0, 2 * np.pi, n_side)
    s = np.stack([L / 2 - h * L, h * rad * np.cos(a), h * rad * np.sin(a)], axis=1)
    rr = rad * np.sqrt(rng.uniform(0, 1, M - n_side))
    b = rng.uniform(0, 2 * np.pi, M - n_side)
    d = np.stack([np.full(M - n_side, -L / 2), rr * np.cos(b), rr * np.sin(b)], axis=1)
    return np.concatenate([s, d])


def _cylinder(M, rng):
    L, rad = 1.2, 0.2
    a = rng.uniform(0, 2 * np.pi, M)
    x = rng.uniform(-L / 2, L / 2, M)
    return np.stack([x, rad * np.cos(a), rad * np.sin(a)], axis=1)


SHAPES = {"box": _box, "torus": _torus, "cross": _cross, "cone": _cone, "ellipsoid": _ellipsoid,
          "cylinder": _cylinder}
DEFAULT_SHAPES = ("box", "torus", "cross", "cone", "ellipsoid", "cylinder")


def base_shape(name, M, rng) -> np.ndarray:
    try:
        fn = SHAPES[name]
    except KeyError:
        raise InvalidInputError(f"unknown base shape {name!r}; choose from {sorted(SHAPES)}") from None
    return fn(M, rng)


def two_part_shape(M, rng):
    """A stem (label 0) with a separated cap (label 1) on top."""
    n_cap = M // 2
    stem = sample_mesh_surface(_box_mesh([-0.12, -0.12, -0.7], [0.12, 0.12, 0.1]), M - n_cap, rng).points
    cap = sample_mesh_surface(_box_mesh([-0.5, -0.3, 0.3], [0.5, 0.3, 0.45]), n_cap, rng).points
    pts = np.concatenate([stem, cap])
    labels = np.concatenate([np.zeros(M - n_cap, np.int64), np.ones(n_cap, np.int64)])
    return pts, labels


# ------------------------------------------------------- displacement fields
def bend_field(p):
    return np.stack([np.zeros(len(p)), np.zeros(len(p)), 0.6 * p[:, 0] ** 2 - 0.1], axis=1)


def twist_field(p):
    return np.stack([np.zeros(len(p)), 0.8 * p[:, 0] * p[:, 2], -0.8 * p[:, 0] * p[:, 1]], axis=1)


FIELDS = (bend_field, twist_field)


# ------------------------------------------------------------------- spec
@dataclass
class SynthSpec:
    kind: str
    n: int = 200
    M: int = 256
    sigma: float = 0.01
    seed: int = 0
    K_true: int = 4
    shapes: list = field(default_factory=lambda: list(DEFAULT_SHAPES))
    base: str = "box"
    rotate_z: bool = False
    family: str = "affine12"
    amplitude: float = 0.3
    family_amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown generator kind {self.kind!r}; choose from {KINDS}")
        if self.n < 1 or self.M < 1:
            raise InvalidInputError("n and M must be >= 1")
        if self.sigma < 0 or self.amplitude < 0 or self.family_amplitude < 0:
            raise InvalidInputError("sigma and amplitudes must be >= 0")
        if self.kind in ("affine-orbit", "two-part-labeled") and self.amplitude >= 0.9:
            raise InvalidInputError("transform amplitude must stay below 0.9 to keep maps invertible")
        if self.kind == "cluster-mixture":
            if not 1 <= self.K_true <= len(self.shapes):
                raise InvalidInputError(f"K_true must be in [1, {len(self.shapes)}]")
            for s in self.shapes[:self.K_true]:
                if s not in SHAPES:
                    raise InvalidInputError(f"unknown base shape {s!r}")
        TransformFamily.parse(self.family)

    @classmethod
    def from_dict(cls, d) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def _random_transform(family, amplitude, rng):
    fam = TransformFamily.parse(family)
    raw = rng.uniform(-amplitude, amplitude, fam.raw_dim)
    return decode_transform(fam, raw), raw


def _jitter(pts, sigma, rng):
    return pts + rng.normal(0.0, sigma, size=pts.shape) if sigma > 0 else pts.copy()


def synth_generate(spec: SynthSpec):
    """Return ``(clouds, truth)``; ``truth`` holds the generating cluster
    ids / transforms / amplitudes and the clean base shapes."""
    rng = np.random.default_rng(spec.seed)
    gen = _GENERATORS[spec.kind]
    return gen(spec, rng)


def _cluster_mixture(spec, rng):
    names = list(spec.shapes[:spec.K_true])
    bases = [base_shape(n, spec.M, rng) for n in names]
    ids = rng.permutation(np.arange(spec.n) % spec.K_true)
    clouds, angles = [], []
    for i in range(spec.n):
        pts = _jitter(bases[ids[i]], spec.sigma, rng)
        angle = 0.0
        if spec.rotate_z:
            angle = float(rng.uniform(0, 2 * np.pi))
            T = z_rotation(angle)
            pts = affine_points(T.linear, T.translation, pts)
        angles.append(angle)
        clouds.append(PointCloud(pts, None, int(ids[i])))
    truth = {"kind": spec.kind, "cluster": ids.tolist(), "angles": angles, "shapes": names,
             "bases": [b.tolist() for b in bases]}
    return clouds, truth


def _orbit(spec, rng, base, labels=None):
    clouds, Ls, ts, amps = [], [], [], []
    for _ in range(spec.n):
        a = 0.0
        pts = base
        if spec.family_amplitude > 0:
            a = float(rng.uniform(-1, 1)) * spec.family_amplitude
            pts = base + a * bend_field(base)
        T, _ = _random_transform(spec.family, spec.amplitude, rng)
        pts = _jitter(affine_points(T.linear, T.translation, pts), spec.sigma, rng)
        clouds.append(PointCloud(pts, None if labels is None else labels.copy(), 0))
        Ls.append(T.linear.tolist())
        ts.append(T.translation.tolist())
        amps.append(a)
    truth = {"kind": spec.kind, "linear": Ls, "translation": ts, "amplitude": amps, "base": base.tolist()}
    if labels is not None:
        truth["base_labels"] = labels.tolist()
    return clouds, truth


def _affine_orbit(spec, rng):
    return _orbit(spec, rng, base_shape(spec.base, spec.M, rng))


def _two_part(spec, rng):
    base, labels = two_part_shape(spec.M, rng)
    return _orbit(spec, rng, base, labels)


def _linear_family(dims):
    def gen(spec, rng):
        base = base_shape(spec.base, spec.M, rng)
        V = np.stack([f(base) for f in FIELDS[:dims]])
        t = rng.uniform(-1, 1, size=(spec.n, dims))
        clouds = []
        for i in range(spec.n):
            pts = base + np.tensordot(t[i], V, axes=1)
            clouds.append(PointCloud(_jitter(pts, spec.sigma, rng), None, 0))
        truth = {"kind": spec.kind, "t": t.tolist(), "base": base.tolist(), "fields": V.tolist()}
        return clouds, truth
    return gen


_GENERATORS = {
    "cluster-mixture": _cluster_mixture,
    "affine-orbit": _affine_orbit,
    "linear-family-1d": _linear_family(1),
    "linear-family-2d": _linear_family(2),
    "two-part-labeled": _two_part,
}


def clean_sample(truth, i) -> np.ndarray:
    """Noise-free version of sample ``i`` reconstructed from ``truth``."""
    kind = truth["kind"]
    if kind == "cluster-mixture":
        base = np.asarray(truth["bases"][truth["cluster"][i]])
        T = z_rotation(truth["angles"][i])
        return affine_points(T.linear, T.translation, base)
    if kind in ("affine-orbit", "two-part-labeled"):
        base = np.asarray(truth["base"])
        pts = base + truth["amplitude"][i] * bend_field(base)
        return affine_points(np.asarray(truth["linear"][i]), np.asarray(truth["translation"][i]), pts)
    base = np.asarray(truth["base"])
    return base + np.tensordot(np.asarray(truth["t"][i]), np.asarray(truth["fields"]), axes=1)
