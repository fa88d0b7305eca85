import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from linshape.datakit import SynthSpec, synth_generate
from linshape.diffgraph import Tape
from linshape.errors import InvalidInputError
from linshape.geometry import PointCloud
from linshape.shapebank import ModelBank, Stage
from linshape.trainer import (ArrayDataset, EpochStats, StageSpec, Trainer, TrainConfig, advance_curriculum,
                              batch_loss, compute_bic, reassign_empty_clusters, reassignment_probabilities, train,
                              train_epoch, warmup_multiplier)

SMALL = dict(encoder_widths=(8, 16, 32), head_hidden=16, field_hidden=16)


def test_warmup_examples():
    assert warmup_multiplier(0) == pytest.approx(0.1)
    assert warmup_multiplier(25) == pytest.approx(0.55)
    assert warmup_multiplier(50) == 1.0
    assert warmup_multiplier(500) == 1.0
    with pytest.raises(InvalidInputError):
        warmup_multiplier(-1)


@given(st.integers(0, 200), st.integers(0, 200))
def test_warmup_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert 0.1 <= warmup_multiplier(lo) <= warmup_multiplier(hi) <= 1.0


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(K=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(reassign_fraction=1.0)
    with pytest.raises(InvalidInputError):
        TrainConfig.from_dict({"K": 2, "learning_rate": 0.1})
    cfg = TrainConfig.from_dict({"K": 3, "encoder_widths": [4, 8]})
    assert cfg.encoder_widths == (4, 8)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def _two_point_bank():
    # single-point "clouds": chamfer = 2 * squared distance
    bank = ModelBank(2, 1, 0, "pointwise", **SMALL)
    bank.set_prototype(0, np.zeros((1, 3)))
    bank.set_prototype(1, np.array([[2.0, 0, 0]]))
    # samples at squared distances (1, 2.5) and (3.5, 0.5) from the prototypes
    X = np.array([[[0.625, np.sqrt(1 - 0.625 ** 2), 0]], [[1.75, np.sqrt(3.5 - 1.75 ** 2), 0]]])
    return bank, X


def test_batch_loss_hand_example():
    bank, X = _two_point_bank()
    with Tape():
        loss, sel, d = batch_loss(X, bank, Stage.PROTO)
    assert loss.data == pytest.approx(2 + 1)
    assert sel.tolist() == [0, 1]


def test_batch_loss_supervised_restriction():
    bank, X = _two_point_bank()
    bank.class_of_model = [5, 7]
    with Tape():
        loss, sel, _ = batch_loss(X, bank, Stage.PROTO, classes=np.array([7, 7]), supervised=True)
    assert sel.tolist() == [1, 1]
    assert loss.data == pytest.approx(5 + 1)
    with pytest.raises(InvalidInputError):
        with Tape():
            batch_loss(X, bank, Stage.PROTO, classes=np.array([7, 9]), supervised=True)


def test_batch_loss_single_prototype_is_zero():
    bank = ModelBank(1, 8, 0, **SMALL)
    c = np.random.default_rng(0).normal(size=(8, 3))
    bank.set_prototype(0, c)
    with Tape():
        loss, _, _ = batch_loss(c[None], bank, Stage.PROTO)
    assert loss.data == 0.0


def _cluster_data(n=40, M=32, sigma=0.01, K_true=4, seed=0):
    clouds, truth = synth_generate(SynthSpec("cluster-mixture", n=n, M=M, sigma=sigma, K_true=K_true, seed=seed))
    return clouds, truth


def test_train_epoch_zero_lr_keeps_parameters():
    clouds, _ = _cluster_data()
    data = ArrayDataset.from_clouds(clouds)
    cfg = TrainConfig(K=2, D_max=0, lr=0.0, batch_size=16, **SMALL)
    bank = ModelBank(2, 32, 0, **SMALL)
    bank.set_prototype(0, clouds[0])
    bank.set_prototype(1, clouds[1])
    before = bank.params.state_dict()
    stats = Trainer(bank, cfg).train_epoch(data)
    after = bank.params.state_dict()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])
    assert stats.counts.sum() == len(clouds)
    assert (stats.mean_cd >= 0).all()


def test_epoch_loss_non_increasing_proto_stage():
    clouds, _ = _cluster_data(n=80)
    cfg = TrainConfig(K=4, D_max=0, M=32, epochs_proto=20, final_stage="proto", lr=1e-3, **SMALL)
    _, hist = train(clouds, cfg)
    losses = [e["loss"] for e in hist.epochs]
    for a, b in zip(losses, losses[1:]):
        assert b <= a * 1.05


def test_reassignment_examples():
    bank = ModelBank(2, 8, 0, **SMALL)
    r = np.random.default_rng(0)
    for k in range(2):
        bank.set_prototype(k, r.normal(size=(8, 3)))
    proto1 = bank.prototype(1).copy()
    stats = EpochStats(np.array([20, 20]), np.array([1.0, 1.0]), 1.0)
    assert reassign_empty_clusters(bank, stats, 0.2, r) == []
    np.testing.assert_array_equal(bank.prototype(1), proto1)
    # N/K = 20, fraction 0.2 -> threshold 4; a model with 0 selections is re-seeded
    stats = EpochStats(np.array([40, 0]), np.array([1.0, 0.0]), 1.0)
    assert reassign_empty_clusters(bank, stats, 0.2, r) == [(1, 0)]
    assert np.abs(bank.prototype(1) - bank.prototype(0)).max() < 0.1
    np.testing.assert_allclose(reassignment_probabilities([1.0, 3.0]), [0.25, 0.75])


def test_reassignment_never_fires_above_threshold():
    bank = ModelBank(4, 8, 0, **SMALL)
    stats = EpochStats(np.array([5, 5, 5, 85]), np.ones(4), 1.0)
    # threshold = 0.2 * 100 / 4 = 5
    assert reassign_empty_clusters(bank, stats, 0.2, np.random.default_rng(0)) == []


def _history(losses):
    specs = [StageSpec(Stage.PROTO), StageSpec(Stage.ALIGN)] + [StageSpec(Stage.FULL, d) for d in range(1, len(losses) - 1)]
    return list(zip(specs, losses))


def test_advance_curriculum_order_and_stop():
    cfg = TrainConfig(D_max=5, d_early_stop=0.01)
    assert advance_curriculum(_history([1.0]), cfg) == StageSpec(Stage.ALIGN)
    assert advance_curriculum(_history([1.0, 0.5]), cfg) == StageSpec(Stage.FULL, 1)
    # improvements 0.20, 0.10, 0.004 relative to the previous stage loss
    losses = [1.0, 0.5, 0.4, 0.36, 0.36 * 0.996]
    assert advance_curriculum(_history(losses[:3]), cfg) == StageSpec(Stage.FULL, 2)
    assert advance_curriculum(_history(losses[:4]), cfg) == StageSpec(Stage.FULL, 3)
    assert advance_curriculum(_history(losses), cfg) is None
    # zero improvement stops, a zero threshold always runs to D_max
    assert advance_curriculum(_history([1.0, 0.5, 0.5, 0.5]), cfg) is None
    free = TrainConfig(D_max=2, d_early_stop=0.0)
    assert advance_curriculum(_history([1.0, 0.5, 0.5]), free) == StageSpec(Stage.FULL, 2)
    assert advance_curriculum(_history([1.0, 0.5, 0.5, 0.5]), free) is None
    assert advance_curriculum(_history([1.0]), TrainConfig(final_stage="proto")) is None


def test_bic_properties():
    clouds, _ = _cluster_data(n=20, M=16)
    small = ModelBank(2, 16, 0, **SMALL)
    big = ModelBank(3, 16, 0, **SMALL)
    b_small = compute_bic(clouds, small, mean_cd=0.01)
    b_big = compute_bic(clouds, big, mean_cd=0.01)
    assert b_big.value > b_small.value
    half = compute_bic(clouds, small, mean_cd=0.005)
    assert b_small.value - half.value == pytest.approx(20 * np.log(2))
    zero = compute_bic(clouds, small, mean_cd=0.0)
    assert zero.degenerate and zero.value == -np.inf


def test_train_is_deterministic_and_writes_history(tmp_path):
    clouds, _ = _cluster_data(n=24, M=16, K_true=2)
    cfg = TrainConfig(K=2, D_max=1, M=16, epochs_proto=2, epochs_align=2, epochs_per_dim=2, batch_size=8, seed=3,
                      **SMALL)
    b1, h1 = train(clouds, cfg, history_path=tmp_path / "h.jsonl", checkpoint_dir=tmp_path)
    b2, h2 = train(clouds, cfg)
    assert [e["loss"] for e in h1.epochs] == [e["loss"] for e in h2.epochs]
    for k, v in b1.params.state_dict().items():
        np.testing.assert_array_equal(v, b2.params.state_dict()[k])
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert len(lines) == 6
    rec = json.loads(lines[-1])
    assert set(rec) == {"epoch", "stage", "D", "lr_multiplier", "loss", "per_model_counts", "per_model_mean_cd",
                        "reassignments"}
    assert rec["stage"] == "full" and rec["D"] == 1
    # the freshly unfrozen dimension is inside its warm-up window
    assert rec["lr_multiplier"] == pytest.approx(warmup_multiplier(1))
    assert len(list(tmp_path.glob("stage_*.ckpt"))) == 3


def test_duplicated_prototypes_reach_zero_loss():
    r = np.random.default_rng(0)
    bases = [r.normal(size=(12, 3)) for _ in range(3)]
    clouds = [PointCloud(bases[i % 3].copy(), class_id=i % 3) for i in range(30)]
    cfg = TrainConfig(K=3, D_max=0, M=12, epochs_proto=3, final_stage="proto", **SMALL)
    bank, hist = train(clouds, cfg)
    assert hist.stages[-1][1] == 0.0


def test_train_rejects_small_dataset():
    clouds, _ = _cluster_data(n=3, M=8)
    with pytest.raises(InvalidInputError):
        train(clouds, TrainConfig(K=4, M=8, **SMALL))


def test_supervised_training_respects_classes():
    clouds, _ = _cluster_data(n=40, M=16, K_true=2)
    cfg = TrainConfig(K=2, D_max=0, M=16, epochs_proto=5, final_stage="proto", supervised=True, **SMALL)
    bank, hist = train(clouds, cfg)
    assert bank.class_of_model == [0, 1]
    for e in hist.epochs:
        assert e["per_model_counts"] == [20, 20]


def test_per_class_encoder_builds_one_encoder_per_class():
    clouds, _ = _cluster_data(n=20, M=16, K_true=2)
    cfg = TrainConfig(K=2, D_max=0, M=16, epochs_proto=1, epochs_align=1, final_stage="align",
                      per_class_encoder=True, supervised=True, **SMALL)
    bank, _ = train(clouds, cfg)
    assert len(bank.encoders) == 2
    assert bank.params.names("enc.1.")
