"""Linear shape families and the proto / align / full reconstruction models."""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass

import numpy as np

from .diffgraph import ops
from .diffgraph.checkpoint import load_arrays, save_params
from .diffgraph.core import ParamSet, Tape, Tensor
from .errors import InvalidInputError
from .geometry import AffineTransform, PointCloud, affine_points, as_points
from .netheads import (ImplicitField, MLPHead, SharedEncoder, TransformFamily,
                       decode_transform_graph)


class Stage(enum.IntEnum):
    PROTO = 0
    ALIGN = 1
    FULL = 2

    @classmethod
    def parse(cls, value) -> "Stage":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise InvalidInputError(f"unknown stage {value!r}") from None

    @property
    def key(self):
        return self.name.lower()


@dataclass
class Reconstruction:
    cloud: PointCloud
    model: int
    coords: np.ndarray
    transform: AffineTransform


class ModelBank:
    """K shape models sharing one encoder (or one per class group).

    Parameter names: ``enc.*`` (``enc.{g}.*`` with several encoders),
    ``align.{k}.*``, ``proj.{k}.*``, ``proto.{k}``, ``basis.{k}.{i}``
    (pointwise) or ``field.{k}.{i}.*`` (implicit).
    """

    def __init__(self, K, M, D_max=0, basis="implicit", family="affine12", encoder_widths=(64, 128, 1024),
                 head_hidden=128, field_hidden=128, seed=0, bn_momentum=0.1, class_of_model=None,
                 per_class_encoder=False):
        if K < 1 or M < 1 or D_max < 0:
            raise InvalidInputError(f"invalid bank sizes K={K}, M={M}, D_max={D_max}")
        if basis not in ("pointwise", "implicit"):
            raise InvalidInputError(f"unknown basis parametrization {basis!r}")
        self.K, self.M, self.D_max = int(K), int(M), int(D_max)
        self.basis_kind = basis
        self.family = TransformFamily.parse(family)
        self.encoder_widths = tuple(int(w) for w in encoder_widths)
        self.head_hidden = int(head_hidden)
        self.field_hidden = int(field_hidden)
        self.seed = int(seed)
        self.bn_momentum = bn_momentum
        self.class_of_model = None if class_of_model is None else [int(c) for c in class_of_model]
        self.per_class_encoder = bool(per_class_encoder)
        self.stage = Stage.PROTO
        self.D = 0
        self.proto_labels = [None] * self.K
        self.metadata = {}

        rng = np.random.default_rng(self.seed)
        self.params = ParamSet()
        p = self.params
        if self.per_class_encoder:
            if self.class_of_model is None:
                raise InvalidInputError("per-class encoders need a class for every model")
            groups = sorted(set(self.class_of_model))
            self.encoder_of = [groups.index(c) for c in self.class_of_model]
            self.encoders = [SharedEncoder(p, rng, f"enc.{g}", self.encoder_widths, bn_momentum) for g in range(len(groups))]
        else:
            self.encoder_of = [0] * self.K
            self.encoders = [SharedEncoder(p, rng, "enc", self.encoder_widths, bn_momentum)]
        W = self.encoder_widths[-1]
        self.align_heads = []
        self.proj_heads = []
        self.fields = []
        for k in range(self.K):
            p.add(f"proto.{k}", np.zeros((self.M, 3)))
            self.align_heads.append(MLPHead(p, rng, f"align.{k}", W, self.family.raw_dim, self.head_hidden,
                                            zero_final=True))
            # projection outputs start random; the zero basis keeps the
            # reconstruction unchanged while letting both receive gradient
            self.proj_heads.append(MLPHead(p, rng, f"proj.{k}", W, self.D_max, self.head_hidden,
                                           zero_final=False, per_output_final=True) if self.D_max else None)
            fields_k = []
            for i in range(self.D_max):
                if basis == "pointwise":
                    p.add(f"basis.{k}.{i}", np.zeros((self.M, 3)))
                else:
                    fields_k.append(ImplicitField(p, rng, f"field.{k}.{i}", self.field_hidden, zero_final=True))
            self.fields.append(fields_k)

    # ------------------------------------------------------------------ config
    def config(self) -> dict:
        return {
            "K": self.K, "M": self.M, "D_max": self.D_max, "basis": self.basis_kind, "family": self.family.key,
            "encoder_widths": list(self.encoder_widths), "head_hidden": self.head_hidden,
            "field_hidden": self.field_hidden, "seed": self.seed, "bn_momentum": self.bn_momentum,
            "class_of_model": self.class_of_model, "per_class_encoder": self.per_class_encoder,
        }

    def set_stage(self, stage, D=0):
        stage = Stage.parse(stage)
        D = int(D) if stage == Stage.FULL else 0
        if D > self.D_max:
            raise InvalidInputError(f"D={D} exceeds D_max={self.D_max}")
        self.stage, self.D = stage, D

    def set_prototype(self, k, cloud):
        pts = as_points(cloud)
        if pts.shape != (self.M, 3):
            raise InvalidInputError(f"prototype must have {self.M} points, got {len(pts)}")
        self.params[f"proto.{k}"].assign(pts)
        if isinstance(cloud, PointCloud) and cloud.labels is not None:
            self.proto_labels[k] = cloud.labels.copy()

    def prototype(self, k) -> np.ndarray:
        return self.params[f"proto.{k}"].value

    # ------------------------------------------------------- parameter groups
    def encoder_names(self):
        return self.params.names("enc.")

    def stage_param_names(self, stage=None, D=None):
        """Trainable parameter names used at ``stage``/``D``."""
        stage = self.stage if stage is None else Stage.parse(stage)
        D = self.D if D is None else D
        names = [f"proto.{k}" for k in range(self.K)]
        if stage >= Stage.ALIGN:
            names += self.encoder_names() + self.params.names("align.")
        if stage == Stage.FULL and D > 0:
            for k in range(self.K):
                names += self.dimension_param_names(k, range(D))
                names += self.params.names(f"proj.{k}.fc1.")
        return [n for n in names if self.params[n].trainable]

    def dimension_param_names(self, k, dims):
        names = []
        for i in dims:
            names += self.proj_heads[k].final_names([i])
            if self.basis_kind == "pointwise":
                names.append(f"basis.{k}.{i}")
            else:
                names += self.params.names(f"field.{k}.{i}.")
        return names

    def n_free_params(self, stage=None, D=None) -> int:
        """Per-model free parameters used by the BIC: prototype, basis and
        the final layers of the active heads."""
        stage = self.stage if stage is None else Stage.parse(stage)
        D = self.D if D is None else D
        n = 3 * self.M
        if stage >= Stage.ALIGN:
            n += self.params.count("align.0.fc2")
        if stage == Stage.FULL:
            for name in self.dimension_param_names(0, range(D)):
                n += self.params[name].value.size
        return n

    # ------------------------------------------------------------ graph parts
    def basis_graph(self, k, D, proto=None):
        """Tensor (D, M, 3) of displacement fields; implicit fields are
        evaluated at the current prototype coordinates."""
        if self.basis_kind == "pointwise":
            return ops.stack([self.params.tensor(f"basis.{k}.{i}") for i in range(D)], axis=0)
        proto = self.params.tensor(f"proto.{k}") if proto is None else proto
        return ops.stack([self.fields[k][i](proto) for i in range(D)], axis=0)

    def global_features(self, x):
        """Encoder outputs for every encoder group, list indexed by group."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        return [enc(x) for enc in self.encoders]

    def forward(self, x, stage=None, D=None, features=None):
        """Differentiable reconstructions for every model.

        Returns a dict with ``recs`` (K tensors (B, M, 3)), ``coords`` (K
        tensors (B, D) or None), ``linear``/``translation`` (K tensors or
        None) and the encoder ``features``.
        """
        stage = self.stage if stage is None else Stage.parse(stage)
        D = (self.D if D is None else D) if stage == Stage.FULL else 0
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        B = x.shape[0]
        out = {"recs": [], "coords": [None] * self.K, "linear": [None] * self.K, "translation": [None] * self.K,
               "features": None}
        if stage == Stage.PROTO:
            for k in range(self.K):
                out["recs"].append(ops.broadcast_to(self.params.tensor(f"proto.{k}"), (B, self.M, 3)))
            return out
        feats = self.global_features(x) if features is None else features
        out["features"] = feats
        for k in range(self.K):
            g = feats[self.encoder_of[k]]
            L, t = decode_transform_graph(self.family, self.align_heads[k](g))
            c = self.params.tensor(f"proto.{k}")
            if D > 0:
                a = self.proj_heads[k](g, D)
                u = ops.combine_basis(c, a, self.basis_graph(k, D, c))
                out["coords"][k] = a
            else:
                u = c
            out["recs"].append(ops.affine_points(u, L, t))
            out["linear"][k], out["translation"][k] = L, t
        return out

    # ----------------------------------------------------- numpy conveniences
    def materialize_basis(self, k, D=None) -> np.ndarray:
        D = self.D if D is None else D
        if D == 0:
            return np.zeros((0, self.M, 3))
        with Tape(mode="eval", record=False):
            return self.basis_graph(k, D).data.copy()

    def family_element(self, k, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        D = len(a)
        if D > self.D_max:
            raise InvalidInputError(f"{D} coordinates for a family of dimension at most {self.D_max}")
        return ops.family_points(self.prototype(k), a, self.materialize_basis(k, D))

    def encode(self, x, mode="eval", group=0):
        pts = np.asarray(x.points if isinstance(x, PointCloud) else x, dtype=np.float64)
        batch = pts[None] if pts.ndim == 2 else pts
        with Tape(mode=mode, record=False):
            g = self.encoders[group](Tensor(batch)).data
        return g[0] if pts.ndim == 2 else g

    def predict_alignment(self, k, g) -> AffineTransform:
        g = np.asarray(g, dtype=np.float64).reshape(1, -1)
        with Tape(mode="eval", record=False):
            L, t = decode_transform_graph(self.family, self.align_heads[k](Tensor(g)))
        return AffineTransform(np.asarray(L.data)[0], np.asarray(t.data)[0])

    def predict_coordinates(self, k, g, D=None) -> np.ndarray:
        D = self.D if D is None else D
        if D == 0:
            return np.zeros(0)
        g = np.asarray(g, dtype=np.float64).reshape(1, -1)
        with Tape(mode="eval", record=False):
            return self.proj_heads[k](Tensor(g), D).data[0].copy()

    def reconstruct(self, k, x, stage=None) -> Reconstruction:
        stage = self.stage if stage is None else Stage.parse(stage)
        if stage > self.stage:
            raise InvalidInputError(f"stage {stage.key} is beyond the bank's active stage {self.stage.key}")
        pts = as_points(x)
        D = self.D if stage == Stage.FULL else 0
        with Tape(mode="eval", record=False):
            res = self.forward(pts[None], stage, D)
        rec = res["recs"][k].data[0].copy()
        coords = res["coords"][k].data[0].copy() if res["coords"][k] is not None else np.zeros(0)
        if res["linear"][k] is not None:
            T = AffineTransform(np.asarray(res["linear"][k].data)[0], np.asarray(res["translation"][k].data)[0])
        else:
            T = AffineTransform.identity()
        return Reconstruction(PointCloud(rec), k, coords, T)

    def distances(self, X, stage=None, batch_size=64, labels=None) -> np.ndarray:
        """Eval-mode Chamfer distances (N, K) of every cloud to every model."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        out = np.empty((len(X), self.K))
        for s in range(0, len(X), batch_size):
            xb = X[s:s + batch_size]
            with Tape(mode="eval", record=False):
                res = self.forward(xb, stage)
                for k, rec in enumerate(res["recs"]):
                    out[s:s + len(xb), k] = ops.chamfer_pairs(rec.data, xb).data
        return out

    # ------------------------------------------------------------ persistence
    def save(self, path, extra=None):
        save_params(self.params, path)
        meta = {"bank": self.config(), "stage": self.stage.key, "D": self.D,
                "proto_labels": [None if l is None else l.tolist() for l in self.proto_labels],
                "metadata": self.metadata}
        if extra:
            meta.update(extra)
        tmp = f"{path}.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(meta, fh, indent=1)
        os.replace(tmp, f"{path}.json")

    @classmethod
    def load(cls, path) -> "ModelBank":
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
        cfg = meta["bank"]
        bank = cls(cfg["K"], cfg["M"], cfg["D_max"], cfg["basis"], cfg["family"], cfg["encoder_widths"],
                   cfg["head_hidden"], cfg["field_hidden"], cfg["seed"], cfg["bn_momentum"],
                   cfg["class_of_model"], cfg["per_class_encoder"])
        arrays, _ = load_arrays(path)
        bank.params.load_state_dict(arrays)
        bank.set_stage(meta["stage"], meta["D"])
        bank.proto_labels = [None if l is None else np.asarray(l, dtype=np.int64) for l in meta["proto_labels"]]
        bank.metadata = meta.get("metadata", {})
        return bank


def reconstruct(k, x, stage, bank: ModelBank) -> Reconstruction:
    return bank.reconstruct(k, x, stage)


def assign_best(x, bank: ModelBank, stage=None):
    """Best model for ``x`` and its Chamfer distance (ties -> lowest k)."""
    d = bank.distances(as_points(x)[None], stage)[0]
    k = int(np.argmin(d))
    return k, float(d[k])


def assign_dataset(bank: ModelBank, X, stage=None, batch_size=64):
    d = bank.distances(X, stage, batch_size)
    k = np.argmin(d, axis=1)
    return k, d[np.arange(len(d)), k]


def reassignment_clone(bank: ModelBank, dead, source, rng, noise_var=1e-4):
    """Replace model ``dead`` by a noisy copy of ``source``.

    Prototype and basis get i.i.d. Gaussian noise of variance ``noise_var``;
    heads are copied exactly.  For implicit fields the noise goes on the
    final-layer weights, scaled so the induced displacement noise has about
    ``noise_var`` variance at the source prototype.
    """
    if dead == source:
        raise InvalidInputError("cannot clone a model onto itself")
    p = bank.params
    std = np.sqrt(noise_var)
    for name in p.names(f"align.{source}.") + p.names(f"proj.{source}."):
        p[name.replace(f".{source}.", f".{dead}.", 1)].assign(p[name].value)
    src_proto = p[f"proto.{source}"].value
    p[f"proto.{dead}"].assign(src_proto + rng.normal(0.0, std, size=src_proto.shape))
    bank.proto_labels[dead] = None if bank.proto_labels[source] is None else bank.proto_labels[source].copy()
    for i in range(bank.D_max):
        if bank.basis_kind == "pointwise":
            v = p[f"basis.{source}.{i}"].value
            p[f"basis.{dead}.{i}"].assign(v + rng.normal(0.0, std, size=v.shape))
            continue
        for name in p.names(f"field.{source}.{i}."):
            p[name.replace(f"field.{source}.", f"field.{dead}.", 1)].assign(p[name].value)
        with Tape(mode="eval", record=False):
            h = bank.fields[source][i].hidden(Tensor(src_proto)).data
        mean_sq = float((h * h).sum(axis=1).mean())
        w_std = std / np.sqrt(mean_sq) if mean_sq > 0 else 0.0
        w = p[f"field.{dead}.{i}.fc3.weight"]
        w.assign(w.value + rng.normal(0.0, w_std, size=w.value.shape))
    return bank
