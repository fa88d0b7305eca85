"""Prototype and family-sweep export."""
from __future__ import annotations

import os

import numpy as np

from ..errors import InvalidInputError
from ..geometry import PointCloud, as_points
from ..shapebank import ModelBank, Stage
from .meshio import export_ply


def model_coordinates(bank: ModelBank, k, dataset, batch_size=64):
    """Predicted family coordinates (n, D) of the samples assigned to ``k``."""
    X = np.stack([as_points(c) for c in dataset])
    d = bank.distances(X, batch_size=batch_size)
    mine = np.flatnonzero(np.argmin(d, axis=1) == k)
    if len(mine) == 0:
        raise InvalidInputError(f"model {k} has no assigned samples")
    g = np.concatenate([bank.encode(X[s:s + batch_size], group=bank.encoder_of[k])
                        for s in range(0, len(X), batch_size)])[mine]
    return np.stack([bank.predict_coordinates(k, gi) for gi in g])


def family_sweep(bank: ModelBank, k, dims, dataset, percentiles=(5, 50, 95)):
    """``{"center": cloud, (dim, pct): cloud}`` where each sweep moves one
    amplitude to a percentile and keeps the others at their median."""
    if bank.stage != Stage.FULL or bank.D == 0:
        raise InvalidInputError("family sweeps need a bank at the full stage with D >= 1")
    A = model_coordinates(bank, k, dataset)
    med = np.median(A, axis=0)
    out = {"center": bank.family_element(k, med)}
    for i in dims:
        if not 0 <= i < bank.D:
            raise InvalidInputError(f"dimension {i} outside [0, {bank.D})")
        for p in percentiles:
            a = med.copy()
            a[i] = np.percentile(A[:, i], p)
            out[(i, p)] = bank.family_element(k, a)
    return out


def export_family_sweep(bank: ModelBank, k, dims, dataset, out_dir, percentiles=(5, 50, 95)) -> list:
    sweep = family_sweep(bank, k, dims, dataset, percentiles)
    labels = bank.proto_labels[k]
    paths = []
    for key, pts in sweep.items():
        name = f"model{k}_center.ply" if key == "center" else f"model{k}_dim{key[0]}_p{key[1]:g}.ply"
        paths.append(export_ply(PointCloud(pts, labels), os.path.join(out_dir, name)))
    return paths


def export_prototypes(bank: ModelBank, out_dir) -> list:
    return [export_ply(PointCloud(bank.prototype(k).copy(), bank.proto_labels[k]),
                       os.path.join(out_dir, f"model{k}_prototype.ply")) for k in range(bank.K)]
