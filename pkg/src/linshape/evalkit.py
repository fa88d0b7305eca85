"""Evaluation protocols: clustering accuracy, reconstruction error, label
transfer segmentation, IoU and feature extraction."""
from __future__ import annotations

import csv
import json
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .diffgraph.core import Tape
from .errors import InvalidInputError
from .geometry import PointCloud, as_points, chamfer_with_correspondence
from .kernels import batch_nn, batch_nn_labeled
from .shapebank import ModelBank, Stage, assign_dataset

DEFAULT_TEMPERATURE = 100.0


def _stack(dataset):
    clouds = list(dataset)
    if not clouds:
        raise InvalidInputError("empty dataset")
    X = np.stack([as_points(c) for c in clouds])
    classes = [c.class_id if isinstance(c, PointCloud) else None for c in clouds]
    return clouds, X, classes


def _smallest_most_common(values):
    counts = Counter(values)
    top = max(counts.values())
    return min(v for v, n in counts.items() if n == top)


# ----------------------------------------------------------------- clustering
def majority_label_map(bank: ModelBank, train_set) -> dict:
    """Model index -> class id by majority vote of the samples it wins.

    Ties go to the smallest class id; models that win nothing get the most
    frequent class of the whole set.
    """
    clouds, X, classes = _stack(train_set)
    if any(c is None for c in classes):
        raise InvalidInputError("majority_label_map needs class ids on every sample")
    assigned, _ = assign_dataset(bank, X)
    fallback = _smallest_most_common(classes)
    out = {}
    for k in range(bank.K):
        votes = [c for c, a in zip(classes, assigned) if a == k]
        out[k] = _smallest_most_common(votes) if votes else fallback
    return out


def clustering_accuracy(bank: ModelBank, labelmap, test_set) -> float:
    clouds, X, classes = _stack(test_set)
    missing = [k for k in range(bank.K) if k not in labelmap]
    if missing:
        raise InvalidInputError(f"label map misses models {missing}")
    assigned, _ = assign_dataset(bank, X)
    hits = [labelmap[int(a)] == c for a, c in zip(assigned, classes)]
    return float(np.mean(hits))


def mean_cd(bank: ModelBank, dataset) -> float:
    """Mean over the dataset of the best model's Chamfer distance."""
    _, X, _ = _stack(dataset)
    _, d = assign_dataset(bank, X)
    return float(d.mean())


# --------------------------------------------------------------- segmentation
def _transfer_to_prototype(bank, k, sample):
    if not isinstance(sample, PointCloud) or sample.labels is None:
        raise InvalidInputError("annotation needs a labeled sample")
    rec = bank.reconstruct(k, sample).cloud.points
    # reconstruction point p is the image of prototype point p
    _, ia, _ = chamfer_with_correspondence(rec, sample.points)
    return sample.labels[ia]


def annotate_prototype_random(bank: ModelBank, k, sample) -> np.ndarray:
    """Per-prototype-point labels copied from the nearest point of one
    labeled sample to the aligned reconstruction."""
    return _transfer_to_prototype(bank, k, sample).copy()


def annotate_prototype_majority(bank: ModelBank, k, samples) -> np.ndarray:
    samples = list(samples)
    if not samples:
        raise InvalidInputError(f"no samples to annotate model {k}")
    votes = np.stack([_transfer_to_prototype(bank, k, s) for s in samples])   # (S, M)
    labels = np.unique(votes)
    counts = (votes[None] == labels[:, None, None]).sum(axis=1)               # (L, M)
    # argmax picks the first maximum, i.e. the smallest label on ties
    return labels[np.argmax(counts, axis=0)]


@dataclass
class SegmentationResult:
    labels: np.ndarray
    per_part_iou: dict
    miou: float
    model: int


def segment(bank: ModelBank, annotations, x, part_set=None) -> SegmentationResult:
    """Label each input point with the annotation of its nearest
    reconstruction point.  IoU fields are filled when ``x`` carries labels."""
    pts = as_points(x)
    d = bank.distances(pts[None])[0]
    k = int(np.argmin(d))
    if annotations.get(k) is None:
        raise InvalidInputError(f"model {k} has no prototype annotation")
    ann = np.asarray(annotations[k])
    rec = bank.reconstruct(k, pts).cloud.points
    _, ia, _ = chamfer_with_correspondence(pts, rec)
    pred = ann[ia]
    per_part, miou = {}, float("nan")
    if isinstance(x, PointCloud) and x.labels is not None:
        parts = part_set if part_set is not None else np.union1d(np.unique(x.labels), np.unique(ann))
        per_part, miou = iou(pred, x.labels, parts)
    return SegmentationResult(pred, per_part, miou, k)


def iou(pred, gt, part_set):
    """Per-part intersection over union and their mean over ``part_set``.
    A part absent from both prediction and ground truth scores 1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction length {pred.shape} != ground truth {gt.shape}")
    per_part = {}
    for part in part_set:
        p = pred == part
        g = gt == part
        union = np.count_nonzero(p | g)
        per_part[int(part)] = 1.0 if union == 0 else np.count_nonzero(p & g) / union
    return per_part, float(np.mean(list(per_part.values()))) if per_part else float("nan")


def class_miou(results) -> float:
    """Mean over shapes of the per-shape mIoU."""
    return float(np.mean([r.miou for r in results]))


def part_constrained_chamfer(x: PointCloud, y: PointCloud, policy="error") -> float:
    """Chamfer distance whose nearest-neighbor search only matches points
    sharing a part label.

    Labels present on one side only raise (``policy="error"``) or are
    matched against all points (``policy="fallback"``).
    """
    if x.labels is None or y.labels is None:
        raise InvalidInputError("part-constrained Chamfer needs labels on both clouds")
    if policy not in ("error", "fallback"):
        raise InvalidInputError(f"unknown policy {policy!r}")
    lx, ly = x.labels, y.labels
    only = np.setxor1d(np.unique(lx), np.unique(ly))
    if len(only) and policy == "error":
        raise InvalidInputError(f"labels {only.tolist()} are present on one side only")
    da, _, db, _ = batch_nn_labeled(x.points, lx, y.points, ly)
    da, db = da[0], db[0]
    if len(only):
        ua, _, ub, _ = batch_nn(x.points, y.points)
        da = np.where(np.isin(lx, only), ua[0], da)
        db = np.where(np.isin(ly, only), ub[0], db)
    return float(np.mean(da) + np.mean(db))


# ------------------------------------------------------------------ features
def softmin(d, temperature=DEFAULT_TEMPERATURE, axis=-1):
    """Mean-normalized soft minimum ``-ln(mean(exp(-tau * d))) / tau``.
    Always between min(d) and mean(d)."""
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[axis]
    return -(logsumexp(-temperature * d, axis=axis) - np.log(n)) / temperature


@dataclass
class FeatureSet:
    distances: np.ndarray
    distances_coords: np.ndarray
    embedding: np.ndarray


def extract_features(bank: ModelBank, x, temperature=DEFAULT_TEMPERATURE) -> FeatureSet:
    """Distances (K), distances + coordinates (K(1+D)) and the pooled encoder
    feature of one cloud, or stacked arrays for a batch ``(B, M, 3)``."""
    pts = np.asarray(x.points if isinstance(x, PointCloud) else x, dtype=np.float64)
    single = pts.ndim == 2
    X = pts[None] if single else pts
    if bank.stage != Stage.FULL:
        raise InvalidInputError("feature extraction needs a bank at the full stage")
    with Tape(mode="eval", record=False):
        res = bank.forward(X)
    dist = np.empty((len(X), bank.K))
    coords = []
    for k, rec in enumerate(res["recs"]):
        diff = X[:, :, None, :] - rec.data[:, None, :, :]
        sq = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        dist[:, k] = softmin(sq, temperature, axis=2).mean(axis=1)
        if bank.D > 0:
            coords.append(res["coords"][k].data)
    dc = np.concatenate([dist] + coords, axis=1)
    emb = np.concatenate([f.data for f in res["features"]], axis=1)
    if single:
        return FeatureSet(dist[0], dc[0], emb[0])
    return FeatureSet(dist, dc, emb)


# -------------------------------------------------------------------- export
def write_features_csv(path, features, classes=None, sample_ids=None):
    features = np.asarray(features, dtype=np.float64)
    n, f = features.shape
    sample_ids = range(n) if sample_ids is None else sample_ids
    classes = [""] * n if classes is None else classes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class"] + [f"f_{i}" for i in range(f)])
        for sid, c, row in zip(sample_ids, classes, features):
            w.writerow([sid, "" if c is None else c] + [repr(float(v)) for v in row])


def write_segmentation(out_dir, results, classes):
    """Per-sample label files plus ``summary.json`` with per-class mIoU."""
    os.makedirs(out_dir, exist_ok=True)
    by_class = {}
    for i, (r, c) in enumerate(zip(results, classes)):
        np.savetxt(os.path.join(out_dir, f"sample_{i:05d}.labels"), r.labels, fmt="%d")
        by_class.setdefault(str(c), []).append(r.miou)
    per_class = {c: float(np.mean(v)) for c, v in by_class.items()}
    summary = {"per_class_miou": per_class,
               "overall_miou": float(np.mean([r.miou for r in results])) if results else float("nan")}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    return summary
