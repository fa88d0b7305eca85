"""Manifests, sampled-dataset caching and the on-disk cloud set format."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError, LinShapeError, ParseError
from ..geometry import PointCloud, normalize_points, sample_mesh_surface
from .meshio import load_mesh

CACHE_ENV = "LINSHAPE_CACHE"


@dataclass
class DatasetManifest:
    entries: list            # (path, class_id, split or None)
    M: int = 1024
    normalize: bool = True
    seed: int = 0
    root: str | None = None

    def __post_init__(self):
        self.entries = [tuple(e) + (None,) * (3 - len(e)) for e in self.entries]
        paths = [e[0] for e in self.entries]
        if len(set(paths)) != len(paths):
            raise InvalidInputError("manifest paths must be unique")
        if self.M < 1:
            raise InvalidInputError("M must be >= 1")

    def resolve(self, path):
        return path if self.root is None or os.path.isabs(path) else os.path.join(self.root, path)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            d = json.load(fh)
        entries = [(e["path"], e.get("class"), e.get("split")) for e in d["files"]]
        return cls(entries, d.get("M", 1024), d.get("normalize", True), d.get("seed", 0),
                   d.get("root", os.path.dirname(os.path.abspath(path))))


class DatasetBuildError(LinShapeError):
    def __init__(self, failures):
        self.failures = failures
        super().__init__(f"{len(failures)} file(s) failed: " + "; ".join(f"{p}: {e}" for p, e in failures))


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cache_key(path, M, normalize, seed):
    payload = json.dumps([_file_digest(path), int(M), bool(normalize), int(seed)])
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


def _sample_file(path, M, normalize, seed, digest):
    rng = np.random.default_rng([int(seed), int(digest[:16], 16)])
    mesh = load_mesh(path)
    pts = sample_mesh_surface(mesh, M, rng).points
    if normalize:
        pts = normalize_points(pts)
    # cached arrays are float32; round here so fresh and cached agree bitwise
    return pts.astype("<f4").astype(np.float64)


def _write_cache(cache_dir, key, pts, meta):
    os.makedirs(cache_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())
    os.replace(tmp, os.path.join(cache_dir, f"{key}.bin"))
    fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(meta, fh)
    os.replace(tmp, os.path.join(cache_dir, f"{key}.json"))


def _read_cache(cache_dir, key):
    head = os.path.join(cache_dir, f"{key}.json")
    blob = os.path.join(cache_dir, f"{key}.bin")
    if not (os.path.exists(head) and os.path.exists(blob)):
        return None
    with open(head) as fh:
        meta = json.load(fh)
    arr = np.fromfile(blob, dtype="<f4")
    if arr.size != meta["M"] * 3:
        return None
    return arr.reshape(-1, 3).astype(np.float64)


def build_dataset(manifest: DatasetManifest, cache_dir=None) -> list:
    """Sample every manifest mesh to M points.  ``cache_dir`` (default
    ``$LINSHAPE_CACHE`` when set) keeps float32 copies keyed by file content,
    M, normalization and seed."""
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    clouds, failures = [], []
    for path, cls_id, _split in manifest.entries:
        full = manifest.resolve(path)
        try:
            digest = _file_digest(full)
            key = cache_key(full, manifest.M, manifest.normalize, manifest.seed)
            pts = _read_cache(cache_dir, key) if cache_dir else None
            if pts is None:
                pts = _sample_file(full, manifest.M, manifest.normalize, manifest.seed, digest)
                if cache_dir:
                    _write_cache(cache_dir, key, pts, {"path": full, "M": manifest.M,
                                                       "normalize": manifest.normalize, "seed": manifest.seed,
                                                       "dtype": "<f4", "shape": [manifest.M, 3]})
            clouds.append(PointCloud(pts, None, None if cls_id is None else int(cls_id)))
        except (OSError, LinShapeError, ValueError) as exc:
            failures.append((full, str(exc)))
    if failures:
        raise DatasetBuildError(failures)
    return clouds


# --------------------------------------------------------------- cloud sets
def save_cloudset(out_dir, clouds, truth=None, extra=None):
    """``dataset.json`` + ``points.bin`` (float64 LE, N x M x 3) and, when
    every cloud is labeled, ``labels.bin`` (int32 LE, N x M)."""
    clouds = list(clouds)
    if not clouds:
        raise InvalidInputError("no clouds to save")
    os.makedirs(out_dir, exist_ok=True)
    X = np.stack([c.points for c in clouds]).astype("<f8")
    has_labels = all(c.labels is not None for c in clouds)
    meta = {"format": "linshape-cloudset", "version": 1, "N": len(clouds), "M": int(X.shape[1]),
            "classes": [c.class_id for c in clouds], "has_labels": has_labels}
    if extra:
        meta.update(extra)
    X.tofile(os.path.join(out_dir, "points.bin"))
    if has_labels:
        np.stack([c.labels for c in clouds]).astype("<i4").tofile(os.path.join(out_dir, "labels.bin"))
    if truth is not None:
        with open(os.path.join(out_dir, "truth.json"), "w") as fh:
            json.dump(truth, fh)
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return out_dir


def load_cloudset(path) -> list:
    """Read a directory written by :func:`save_cloudset`, or a manifest JSON."""
    if os.path.isfile(path):
        return build_dataset(DatasetManifest.load(path))
    meta_path = os.path.join(path, "dataset.json")
    if not os.path.exists(meta_path):
        raise InvalidInputError(f"{path} has no dataset.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format") != "linshape-cloudset":
        if "files" in meta:
            return build_dataset(DatasetManifest.load(meta_path))
        raise ParseError("not a cloud set", path=meta_path)
    N, M = meta["N"], meta["M"]
    X = np.fromfile(os.path.join(path, "points.bin"), dtype="<f8")
    if X.size != N * M * 3:
        raise ParseError(f"points.bin holds {X.size} values, expected {N * M * 3}", path=path)
    X = X.reshape(N, M, 3).astype(np.float64)
    labels = None
    if meta.get("has_labels"):
        labels = np.fromfile(os.path.join(path, "labels.bin"), dtype="<i4").reshape(N, M).astype(np.int64)
    classes = meta.get("classes") or [None] * N
    return [PointCloud(X[i], None if labels is None else labels[i], classes[i]) for i in range(N)]


def load_truth(path):
    p = os.path.join(path, "truth.json")
    if not os.path.exists(p):
        return None
    with open(p) as fh:
        return json.load(fh)


# ----------------------------------------------------------------- records
@dataclass
class RunRecord:
    command: str
    config: dict
    input_hash: str
    metrics: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def write(self, path):
        missing = [c for c in self.checkpoints if not os.path.exists(c)]
        if missing:
            raise InvalidInputError(f"run record references missing files: {missing}")
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=1)
        return path


def hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        if os.path.isdir(p):
            for root, _, files in sorted(os.walk(p)):
                for f in sorted(files):
                    h.update(f.encode())
                    h.update(_file_digest(os.path.join(root, f)).encode())
        elif os.path.exists(p):
            h.update(_file_digest(p).encode())
    return h.hexdigest()
