"""End-to-end optimisation: min-over-models Chamfer loss, curriculum,
warm-up, cluster reassignment and model selection."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .diffgraph import ops
from .diffgraph.adam import AdamState, adam_step
from .diffgraph.core import Tape, run_backward
from .errors import InvalidInputError, NumericError
from .geometry import PointCloud, kmeanspp_seed
from .shapebank import ModelBank, Stage, assign_dataset, reassignment_clone

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    K: int = 10
    D_max: int = 5
    basis: str = "implicit"
    family: str = "affine12"
    lr: float = 1e-3
    batch_size: int = 64
    M: int = 1024
    epochs_proto: int = 100
    epochs_align: int = 100
    epochs_per_dim: int = 50
    final_stage: str = "full"
    warmup_epochs: int = 50
    reassign_fraction: float = 0.2
    reassign_noise_var: float = 1e-4
    seed: int = 0
    supervised: bool = False
    per_class_encoder: bool = False
    d_early_stop: float = 0.01
    part_constrained: bool = False
    encoder_widths: tuple = (64, 128, 1024)
    head_hidden: int = 128
    field_hidden: int = 128
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.K < 1 or self.D_max < 0 or self.batch_size < 1:
            raise InvalidInputError("need K >= 1, D_max >= 0, batch_size >= 1")
        if not 0 <= self.reassign_fraction < 1:
            raise InvalidInputError("reassign_fraction must be in [0, 1)")
        Stage.parse(self.final_stage)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


@dataclass
class EpochStats:
    counts: np.ndarray
    mean_cd: np.ndarray
    loss: float
    reassignments: list = field(default_factory=list)


@dataclass
class StageSpec:
    stage: Stage
    D: int = 0

    @property
    def label(self):
        return f"full(D={self.D})" if self.stage == Stage.FULL else self.stage.key


# ------------------------------------------------------------------ dataset
@dataclass
class ArrayDataset:
    X: np.ndarray                 # (N, M, 3)
    classes: np.ndarray | None    # (N,)
    labels: np.ndarray | None     # (N, M)

    def __len__(self):
        return len(self.X)

    @classmethod
    def from_clouds(cls, clouds) -> "ArrayDataset":
        if isinstance(clouds, ArrayDataset):
            return clouds
        clouds = list(clouds)
        if not clouds:
            raise InvalidInputError("empty dataset")
        sizes = {len(c) for c in clouds}
        if len(sizes) != 1:
            raise InvalidInputError(f"all clouds must have the same number of points, got {sorted(sizes)}")
        X = np.stack([c.points for c in clouds])
        classes = None
        if all(c.class_id is not None for c in clouds):
            classes = np.array([c.class_id for c in clouds], dtype=np.int64)
        labels = None
        if all(c.labels is not None for c in clouds):
            labels = np.stack([c.labels for c in clouds])
        return cls(X, classes, labels)

    def cloud(self, i) -> PointCloud:
        return PointCloud(self.X[i], None if self.labels is None else self.labels[i],
                          None if self.classes is None else int(self.classes[i]))


# ------------------------------------------------------------------ warm-up
def warmup_multiplier(epoch_in_stage, warmup_epochs=50) -> float:
    """Learning-rate multiplier for freshly unfrozen weights: 0.1 at the
    first epoch, linear to 1.0 at ``warmup_epochs``, then 1.0."""
    if epoch_in_stage < 0:
        raise InvalidInputError("epoch_in_stage must be >= 0")
    if warmup_epochs <= 0:
        return 1.0
    return 0.1 + 0.9 * min(epoch_in_stage / warmup_epochs, 1.0)


# ------------------------------------------------------------------ loss
def supervision_mask(bank: ModelBank, classes):
    if bank.class_of_model is None:
        raise InvalidInputError("supervised mode needs a class for every model")
    cm = np.asarray(bank.class_of_model)
    mask = cm[None, :] == np.asarray(classes)[:, None]
    if not mask.any(axis=1).all():
        raise InvalidInputError("some samples belong to a class that owns no model")
    return mask


def _pair_labels(bank, k, x_labels):
    """Per-pair label arrays for part-constrained matching; pairs whose
    label sets differ fall back to unconstrained matching."""
    proto = bank.proto_labels[k]
    if proto is None:
        raise InvalidInputError(f"model {k} has no prototype labels for part-constrained training")
    B = len(x_labels)
    rl = np.broadcast_to(proto, (B, len(proto))).copy()
    xl = np.array(x_labels, copy=True)
    pset = set(np.unique(proto).tolist())
    for b in range(B):
        if set(np.unique(xl[b]).tolist()) != pset:
            rl[b] = 0
            xl[b] = 0
    return rl, xl


def batch_distances(bank: ModelBank, X, stage=None, D=None, x_labels=None, part_constrained=False):
    """Differentiable (B, K) distance matrix under the active tape."""
    res = bank.forward(X, stage, D)
    cols = []
    for k, rec in enumerate(res["recs"]):
        if part_constrained:
            rl, xl = _pair_labels(bank, k, x_labels)
            cols.append(ops.chamfer_pairs(rec, X, rl, xl))
        else:
            cols.append(ops.chamfer_pairs(rec, X))
    return ops.stack(cols, axis=1)


def batch_loss(batch, bank: ModelBank, stage=None, D=None, classes=None, supervised=False, x_labels=None,
               part_constrained=False):
    """Sum over the batch of the best model's Chamfer distance.

    Returns ``(loss tensor, selected model per sample, selected distance per
    sample)``.  With ``supervised`` the minimum only ranges over models
    owned by each sample's class.
    """
    X = batch.X if isinstance(batch, ArrayDataset) else np.asarray(batch, dtype=np.float64)
    if len(X) == 0:
        raise InvalidInputError("empty batch")
    d = batch_distances(bank, X, stage, D, x_labels, part_constrained)
    mask = supervision_mask(bank, classes) if supervised else None
    best, idx = ops.min_select(d, mask)
    return ops.sum(best), idx, best.data


# ------------------------------------------------------------------ epochs
class Trainer:
    """Holds optimiser state, warm-up bookkeeping and the RNG stream."""

    def __init__(self, bank: ModelBank, config: TrainConfig):
        self.bank = bank
        self.config = config
        self.opt = AdamState()
        self.rng = np.random.default_rng(config.seed + 1)
        self.epoch = 0
        self.unfrozen_at = {}
        self.threshold_fraction = config.reassign_fraction

    def unfreeze(self, names):
        for n in names:
            self.unfrozen_at.setdefault(n, self.epoch)

    def lr_scale(self, name):
        start = self.unfrozen_at.get(name)
        if start is None:
            return 1.0
        return warmup_multiplier(self.epoch - start, self.config.warmup_epochs)

    def newest_multiplier(self):
        if not self.unfrozen_at:
            return 1.0
        return warmup_multiplier(self.epoch - max(self.unfrozen_at.values()), self.config.warmup_epochs)

    def train_epoch(self, data: ArrayDataset) -> EpochStats:
        return train_epoch(data, self.bank, self.config, self)


def train_epoch(data: ArrayDataset, bank: ModelBank, config: TrainConfig, state: Trainer) -> EpochStats:
    """One shuffled pass of Adam updates on the batch loss."""
    N = len(data)
    K = bank.K
    order = state.rng.permutation(N)
    names = bank.stage_param_names()
    counts = np.zeros(K, dtype=np.int64)
    cd_sum = np.zeros(K)
    total = 0.0
    for bi, s in enumerate(range(0, N, config.batch_size)):
        idx = order[s:s + config.batch_size]
        classes = None if data.classes is None else data.classes[idx]
        labels = None if data.labels is None else data.labels[idx]
        bank.params.zero_grad()
        tape = Tape(mode="train")
        with tape:
            loss, sel, dsel = batch_loss(data.X[idx], bank, classes=classes, supervised=config.supervised,
                                         x_labels=labels, part_constrained=config.part_constrained)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at batch {bi}", where=f"batch {bi}")
        run_backward(tape, loss)
        adam_step(bank.params, state.opt, config.lr, names=names, lr_scale=state.lr_scale)
        np.add.at(counts, sel, 1)
        np.add.at(cd_sum, sel, dsel)
        total += float(loss.data)
    mean_cd = np.divide(cd_sum, counts, out=np.zeros(K), where=counts > 0)
    return EpochStats(counts, mean_cd, total / N)


# ------------------------------------------------------------ reassignment
def reassignment_probabilities(mean_errors):
    e = np.asarray(mean_errors, dtype=np.float64)
    total = e.sum()
    return np.full(len(e), 1.0 / len(e)) if total <= 0 else e / total


def reassign_empty_clusters(bank: ModelBank, stats: EpochStats, threshold_fraction, rng, noise_var=1e-4,
                            opt: AdamState | None = None):
    """Re-seed every model selected fewer than ``threshold_fraction * N / K``
    times by cloning a live model drawn proportionally to its mean error.

    Returns a list of ``(dead, source)`` pairs.
    """
    counts = np.asarray(stats.counts)
    N = counts.sum()
    K = bank.K
    threshold = threshold_fraction * N / K
    dead = [k for k in range(K) if counts[k] < threshold]
    if not dead:
        return []
    alive = [k for k in range(K) if counts[k] >= threshold]
    if not alive:
        raise RuntimeError("every model is below the reassignment threshold")
    probs = reassignment_probabilities(np.asarray(stats.mean_cd)[alive])
    report = []
    for k in dead:
        src = int(alive[rng.choice(len(alive), p=probs)])
        reassignment_clone(bank, k, src, rng, noise_var)
        if opt is not None:
            for name in bank.params.names(f"proto.{k}") + bank.params.names(f"align.{k}.") \
                    + bank.params.names(f"proj.{k}.") + bank.params.names(f"basis.{k}.") \
                    + bank.params.names(f"field.{k}."):
                opt.reset(name)
        report.append((k, src))
    return report


# -------------------------------------------------------------- curriculum
def first_stage() -> StageSpec:
    return StageSpec(Stage.PROTO, 0)


def advance_curriculum(history, config: TrainConfig):
    """Next stage after the last entry of ``history`` or ``None`` to stop.

    ``history`` is a list of ``(StageSpec, loss)`` for completed stages.
    Increasing D stops once the relative loss improvement of the last
    increment falls below ``config.d_early_stop`` (0 disables the check).
    """
    spec, loss = history[-1]
    final = Stage.parse(config.final_stage)
    if spec.stage == Stage.PROTO:
        return StageSpec(Stage.ALIGN) if final >= Stage.ALIGN else None
    if spec.stage == Stage.ALIGN:
        return StageSpec(Stage.FULL, 1) if final == Stage.FULL and config.D_max >= 1 else None
    if len(history) >= 2 and config.d_early_stop > 0:
        prev = history[-2][1]
        improvement = (prev - loss) / prev if prev > 0 else 0.0
        if improvement < config.d_early_stop:
            return None
    return StageSpec(Stage.FULL, spec.D + 1) if spec.D < config.D_max else None


def stage_epochs(spec: StageSpec, config: TrainConfig) -> int:
    return {Stage.PROTO: config.epochs_proto, Stage.ALIGN: config.epochs_align}.get(spec.stage, config.epochs_per_dim)


# ----------------------------------------------------------------- BIC
@dataclass
class BICResult:
    value: float
    mean_cd: float
    n_params: int
    n_samples: int
    degenerate: bool = False


def compute_bic(dataset, bank: ModelBank, mean_cd=None) -> BICResult:
    """K-means style BIC surrogate, lower is better:

        N * ln(mean assigned CD) + K * P * ln(N)

    with P the per-model free parameters (prototype, basis, head final
    layers).  A zero mean distance gives ``-inf`` with ``degenerate=True``.
    """
    data = ArrayDataset.from_clouds(dataset)
    N = len(data)
    if mean_cd is None:
        _, d = assign_dataset(bank, data.X)
        mean_cd = float(d.mean())
    P = bank.K * bank.n_free_params()
    if mean_cd <= 0:
        return BICResult(-math.inf, mean_cd, P, N, True)
    value = N * math.log(mean_cd) + P * math.log(N)
    return BICResult(value, mean_cd, P, N)


# ---------------------------------------------------------------- driver
def build_bank(config: TrainConfig, M, class_of_model=None) -> ModelBank:
    return ModelBank(config.K, M, config.D_max, config.basis, config.family, config.encoder_widths,
                     config.head_hidden, config.field_hidden, config.seed, config.bn_momentum,
                     class_of_model, config.per_class_encoder)


def model_classes(config: TrainConfig, classes):
    """Round-robin assignment of models to the sorted class ids."""
    uniq = np.unique(classes)
    return [int(uniq[k % len(uniq)]) for k in range(config.K)]


def initialize_prototypes(bank: ModelBank, data: ArrayDataset, config: TrainConfig, rng):
    if config.supervised or config.per_class_encoder:
        cm = np.asarray(bank.class_of_model)
        for c in np.unique(cm):
            models = np.flatnonzero(cm == c)
            members = np.flatnonzero(data.classes == c)
            if len(members) < len(models):
                raise InvalidInputError(f"class {c} has fewer samples than models")
            seeds = kmeanspp_seed([data.cloud(i) for i in members], len(models), rng)
            for k, s in zip(models, seeds):
                bank.set_prototype(int(k), s)
    else:
        for k, s in enumerate(kmeanspp_seed([data.cloud(i) for i in range(len(data))], bank.K, rng)):
            bank.set_prototype(k, s)


@dataclass
class RunHistory:
    epochs: list = field(default_factory=list)
    stages: list = field(default_factory=list)   # (label, loss)
    timings: dict = field(default_factory=dict)


def train(dataset, config: TrainConfig, history_path=None, checkpoint_dir=None, on_epoch=None, bank=None):
    """Seed prototypes with k-means++ and run the curriculum.

    Returns ``(bank, RunHistory)``.  ``history_path`` receives one JSON line
    per epoch; ``checkpoint_dir`` a bank checkpoint at every stage boundary.
    """
    data = ArrayDataset.from_clouds(dataset)
    if len(data) < config.K:
        raise InvalidInputError(f"dataset of {len(data)} samples is smaller than K={config.K}")
    if config.part_constrained and data.labels is None:
        raise InvalidInputError("part-constrained training needs per-point labels")
    rng = np.random.default_rng(config.seed)
    class_of_model = None
    if config.supervised or config.per_class_encoder:
        if data.classes is None:
            raise InvalidInputError("supervised / per-class training needs class ids")
        class_of_model = model_classes(config, data.classes)
    if bank is None:
        bank = build_bank(config, data.X.shape[1], class_of_model)
        initialize_prototypes(bank, data, config, rng)
    trainer = Trainer(bank, config)
    history = RunHistory()
    hist_fh = open(history_path, "w") if history_path else None
    t_start = time.perf_counter()
    spec = first_stage()
    stage_losses = []
    try:
        while spec is not None:
            prev_names = set(bank.stage_param_names())
            bank.set_stage(spec.stage, spec.D)
            if stage_losses:
                trainer.unfreeze(sorted(set(bank.stage_param_names()) - prev_names))
                trainer.threshold_fraction /= 10.0
            t0 = time.perf_counter()
            for _ in range(stage_epochs(spec, config)):
                stats = trainer.train_epoch(data)
                if bank.K > 1 and not config.supervised:
                    stats.reassignments = reassign_empty_clusters(bank, stats, trainer.threshold_fraction, trainer.rng,
                                                                  config.reassign_noise_var, trainer.opt)
                rec = {"epoch": trainer.epoch, "stage": spec.stage.key, "D": spec.D,
                       "lr_multiplier": trainer.newest_multiplier(), "loss": stats.loss,
                       "per_model_counts": stats.counts.tolist(), "per_model_mean_cd": stats.mean_cd.tolist(),
                       "reassignments": [list(r) for r in stats.reassignments]}
                history.epochs.append(rec)
                if hist_fh:
                    hist_fh.write(json.dumps(rec) + "\n")
                    hist_fh.flush()
                if on_epoch:
                    on_epoch(rec, bank)
                trainer.epoch += 1
            _, d = assign_dataset(bank, data.X)
            stage_loss = float(d.mean())
            stage_losses.append((spec, stage_loss))
            history.stages.append((spec.label, stage_loss))
            history.timings[spec.label] = time.perf_counter() - t0
            log.info("stage %s done: mean CD %.6g", spec.label, stage_loss)
            if checkpoint_dir:
                bank.save(os.path.join(checkpoint_dir, f"stage_{spec.label.replace('(', '_').replace(')', '').replace('=', '')}.ckpt"))
            spec = advance_curriculum(stage_losses, config)
    finally:
        if hist_fh:
            hist_fh.close()
    history.timings["total"] = time.perf_counter() - t_start
    return bank, history


def select_k(dataset, config: TrainConfig, k_values):
    """Train one bank per K and return ``(best K, {K: BICResult})``."""
    results = {}
    for K in k_values:
        bank, _ = train(dataset, dataclasses.replace(config, K=int(K)))
        results[int(K)] = compute_bic(dataset, bank)
    best = min(results, key=lambda k: results[k].value)
    return best, results
