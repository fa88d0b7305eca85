"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training runs use desk-scale settings (small M, narrow encoders) so the whole
file finishes in roughly a quarter of an hour on one CPU core.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import brute_chamfer, restricted_brute_chamfer
from gradcases import COMPOSED, PRIMITIVES
from linshape import evalkit
from linshape.datakit import DatasetManifest, SynthSpec, build_dataset, clean_sample, synth_generate
from linshape.diffgraph.core import Tape
from linshape.diffgraph.gradcheck import finite_difference_check
from linshape.geometry import PointCloud, chamfer, chamfer_indexed
from linshape.shapebank import assign_dataset, reassignment_clone
from linshape.trainer import TrainConfig, build_bank, compute_bic, train


@pytest.fixture
def report(capsys):
    def emit(num, name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {num:>2} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


def _stack(clouds):
    return np.stack([c.points for c in clouds])


def _stage_end_probe(ends, fn):
    """on_epoch callback calling ``fn(bank)`` on the last epoch of each stage."""
    out = {}

    def cb(rec, bank):
        if rec["epoch"] in ends:
            out[ends[rec["epoch"]]] = fn(bank)
    return cb, out


# --------------------------------------------------------------------- 1
def test_01_gradient_correctness(report):
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for name, build in list(PRIMITIVES.items()) + list(COMPOSED.items()):
        # composed graphs have thousands of weights; probe a few per tensor
        cap = 4 if name in COMPOSED else None
        for seed in range(10):
            fn, inputs, params = build(np.random.default_rng(seed))
            err = finite_difference_check(fn, inputs, params, eps=1e-6, max_entries=cap)
            if err > worst:
                worst, where = err, f"{name}/seed{seed}"
    dt = time.perf_counter() - t0
    report(1, "gradient correctness", worst < 1e-4 and dt < 60,
           f"max rel err {worst:.2e} at {where}, {dt:.1f}s")


# --------------------------------------------------------------------- 2
def test_02_chamfer_oracle(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    sizes = np.linspace(16, 1024, 100).astype(int)
    for M in sizes:
        x = rng.normal(size=(M, 3))
        y = rng.normal(size=(int(rng.integers(16, 1025)), 3))
        worst = max(worst, abs(chamfer_indexed(x, y) - brute_chamfer(x, y)))
    dt = time.perf_counter() - t0
    report(2, "chamfer oracle equivalence", worst <= 1e-12 and dt < 60, f"max abs diff {worst:.1e}, {dt:.1f}s")


# --------------------------------------------------------------------- 3
@pytest.mark.slow
def test_03_stochastic_kmeans_recovery(report):
    clouds, truth = synth_generate(SynthSpec("cluster-mixture", n=200, M=256, sigma=0.01, K_true=4, seed=0))
    oracle = np.mean([chamfer(c.points, np.asarray(truth["bases"][c.class_id])) for c in clouds])
    t0 = time.perf_counter()
    bank, _ = train(clouds, TrainConfig(K=4, D_max=0, M=256, epochs_proto=200, final_stage="proto", seed=0))
    dt = time.perf_counter() - t0
    acc = evalkit.clustering_accuracy(bank, evalkit.majority_label_map(bank, clouds), clouds)
    cd = evalkit.mean_cd(bank, clouds)
    report(3, "stochastic K-means recovery", acc == 1.0 and cd <= 1.5 * oracle and dt < 300,
           f"accuracy {acc:.3f}, CD {cd:.3e} = {cd / oracle:.2f}x oracle, {dt:.0f}s")


# --------------------------------------------------------------------- 4
@pytest.mark.slow
def test_04_alignment_recovery(report):
    clouds, truth = synth_generate(SynthSpec("affine-orbit", n=200, M=64, sigma=0.01, base="cone",
                                             amplitude=0.15, seed=0))
    oracle = np.mean([chamfer(c.points, clean_sample(truth, i)) for i, c in enumerate(clouds)])
    cfg = TrainConfig(K=1, D_max=0, M=64, epochs_proto=20, epochs_align=400, final_stage="align",
                      encoder_widths=(64, 128, 256), batch_size=32, seed=0)
    t0 = time.perf_counter()
    _, hist = train(clouds, cfg)
    dt = time.perf_counter() - t0
    (_, proto), (_, align) = hist.stages
    ok = align <= 0.1 * proto and align <= 5 * oracle and dt < 600
    report(4, "alignment recovery", ok,
           f"align/proto {align / proto:.3f}, align/oracle {align / oracle:.2f}, {dt:.0f}s")


# --------------------------------------------------------------------- 5
@pytest.mark.slow
@pytest.mark.parametrize("basis", ["pointwise", "implicit"])
def test_05_linear_family_recovery(report, basis):
    clouds, truth = synth_generate(SynthSpec("linear-family-1d", n=200, M=64, sigma=0.01, seed=0))
    floor = np.mean([chamfer(c.points, clean_sample(truth, i)) for i, c in enumerate(clouds)])
    cfg = TrainConfig(K=1, D_max=1, M=64, basis=basis, epochs_proto=20, epochs_align=20, epochs_per_dim=150,
                      encoder_widths=(64, 128, 256), batch_size=32, seed=0)
    t0 = time.perf_counter()
    bank, _ = train(clouds, cfg)
    dt = time.perf_counter() - t0
    X = _stack(clouds)
    _, d = assign_dataset(bank, X)
    with Tape(mode="eval", record=False):
        coords = bank.forward(X)["coords"][0].data[:, 0]
    rho = spearmanr(coords, np.asarray(truth["t"])[:, 0]).correlation
    cd = d.mean()
    ok = cd <= 5 * floor and dt < 600 and (basis != "pointwise" or abs(rho) >= 0.9)
    report(5, f"linear-family recovery ({basis})", ok,
           f"CD {cd / floor:.2f}x noise floor, |spearman| {abs(rho):.3f}, {dt:.0f}s")


# --------------------------------------------------------------------- 6
@pytest.mark.slow
def test_06_curriculum_monotonicity(report):
    clouds, _ = synth_generate(SynthSpec("affine-orbit", n=250, M=64, sigma=0.01, amplitude=0.15,
                                         family_amplitude=1.0, seed=0))
    train_set, held_out = clouds[:200], _stack(clouds[200:])
    cfg = TrainConfig(K=1, D_max=1, M=64, epochs_proto=20, epochs_align=150, epochs_per_dim=100,
                      encoder_widths=(64, 128, 256), batch_size=32, seed=0)
    ends = {19: "proto", 169: "align", 269: "full(1)"}
    cb, cds = _stage_end_probe(ends, lambda bank: float(assign_dataset(bank, held_out)[1].mean()))
    train(train_set, cfg, on_epoch=cb)
    p, a, f = cds["proto"], cds["align"], cds["full(1)"]
    ok = a <= 0.9 * p and f <= 0.9 * a
    report(6, "curriculum monotonicity", ok, f"held-out CD x1e3 {p * 1e3:.2f} -> {a * 1e3:.2f} -> {f * 1e3:.2f}")


# --------------------------------------------------------------------- 7
@pytest.mark.slow
def test_07_transform_family_ordering(report):
    clouds, _ = synth_generate(SynthSpec("affine-orbit", n=200, M=64, sigma=0.01, base="cone", amplitude=0.3,
                                         family="trans_aniso_scale6", seed=0))
    cds = {}
    for fam in ("affine12", "rigid6"):
        cfg = TrainConfig(K=1, D_max=0, M=64, family=fam, epochs_proto=20, epochs_align=200, final_stage="align",
                          encoder_widths=(64, 128, 256), batch_size=32, seed=0)
        bank, _ = train(clouds, cfg)
        cds[fam] = evalkit.mean_cd(bank, clouds)
    ok = cds["affine12"] <= 1.05 * cds["rigid6"]
    report(7, "transform family ordering", ok,
           f"affine12 CD {cds['affine12']:.2e}, rigid6 CD {cds['rigid6']:.2e}")


# --------------------------------------------------------------------- 8
def _segment_run(sigma, amplitude, cfg):
    clouds, _ = synth_generate(SynthSpec("two-part-labeled", n=120, M=64, sigma=sigma, amplitude=amplitude,
                                         seed=1))
    train_set, test_set = clouds[:100], clouds[100:]
    bank, _ = train(train_set, cfg)
    ann = {0: evalkit.annotate_prototype_majority(bank, 0, train_set[:10])}
    results = [evalkit.segment(bank, ann, c, [0, 1]) for c in test_set]
    return evalkit.mean_cd(bank, train_set), evalkit.class_miou(results)


@pytest.mark.slow
def test_08_label_transfer_exactness(report):
    t0 = time.perf_counter()
    exact_cfg = TrainConfig(K=1, D_max=0, M=64, epochs_proto=5, final_stage="proto",
                            encoder_widths=(64, 128, 256), batch_size=32, seed=0)
    cd0, miou0 = _segment_run(0.0, 0.0, exact_cfg)
    noisy_cfg = TrainConfig(K=1, D_max=0, M=64, epochs_proto=20, epochs_align=150, final_stage="align",
                            encoder_widths=(64, 128, 256), batch_size=32, seed=0)
    cd1, miou1 = _segment_run(0.02, 0.15, noisy_cfg)
    dt = time.perf_counter() - t0
    ok = cd0 <= 1e-6 and miou0 == 1.0 and miou1 >= 0.95 and dt < 300
    report(8, "label-transfer exactness", ok,
           f"exact: CD {cd0:.1e} mIoU {miou0:.3f}; sigma 0.02: mIoU {miou1:.3f}, {dt:.0f}s")


# --------------------------------------------------------------------- 9
def test_09_part_constrained_chamfer(report):
    rng = np.random.default_rng(9)
    exact, dominates = True, True
    for _ in range(50):
        m, n, parts = rng.integers(8, 200), rng.integers(8, 200), int(rng.integers(1, 5))
        lx = np.concatenate([np.arange(parts), rng.integers(0, parts, m - parts)])
        ly = np.concatenate([np.arange(parts), rng.integers(0, parts, n - parts)])
        x = PointCloud(rng.normal(size=(m, 3)), lx)
        y = PointCloud(rng.normal(size=(n, 3)), ly)
        got = evalkit.part_constrained_chamfer(x, y)
        exact &= got == restricted_brute_chamfer(x.points, lx, y.points, ly)
        dominates &= got >= chamfer(x, y)
    report(9, "part-constrained chamfer", exact and dominates,
           f"oracle exact on all pairs: {exact}, >= chamfer on all pairs: {dominates}")


# -------------------------------------------------------------------- 10
def test_10_reassignment_policy(report):
    clouds, truth = synth_generate(SynthSpec("cluster-mixture", n=60, M=32, K_true=2, seed=0))
    cfg = TrainConfig(K=2, D_max=0, M=32, epochs_proto=15, final_stage="proto", encoder_widths=(8, 16),
                      head_hidden=8, batch_size=16, lr=1e-2, seed=0)
    bank = build_bank(cfg, 32)
    bases = np.asarray(truth["bases"])
    # model 0 straddles both clusters, model 1 is parked far away and starves
    bank.set_prototype(0, bases.mean(axis=0))
    bank.set_prototype(1, bases[0] + 5.0)
    bank, hist = train(clouds, cfg, bank=bank)
    events = [r for rec in hist.epochs for r in rec["reassignments"]]

    rng = np.random.default_rng(10)
    src = bank.params["proto.0"].value.copy()
    diffs = []
    for _ in range(100):
        reassignment_clone(bank, 1, 0, rng, noise_var=1e-4)
        diffs.append(bank.params["proto.1"].value - src)
    var = np.var(np.stack(diffs))
    ok = len(events) == 1 and abs(var - 1e-4) <= 0.2e-4
    report(10, "reassignment policy", ok, f"{len(events)} reassignment(s) {events}, clone noise var {var:.3e}")


# -------------------------------------------------------------------- 11
@pytest.mark.slow
def test_11_bic_model_selection(report):
    clouds, _ = synth_generate(SynthSpec("cluster-mixture", n=300, M=32, sigma=0.01, K_true=3, seed=3))
    t0 = time.perf_counter()
    bics = {}
    for K in range(1, 7):
        bank, _ = train(clouds, TrainConfig(K=K, D_max=0, M=32, epochs_proto=100, final_stage="proto", seed=0))
        bics[K] = compute_bic(clouds, bank).value
    dt = time.perf_counter() - t0
    best = min(bics, key=bics.get)
    report(11, "BIC model selection", best == 3 and dt < 900,
           f"argmin K={best}, BIC " + ", ".join(f"{k}:{v:.0f}" for k, v in bics.items()) + f", {dt:.0f}s")


# -------------------------------------------------------------------- 12
@pytest.mark.slow
def test_12_non_aligned_robustness(report):
    clouds, _ = synth_generate(SynthSpec("cluster-mixture", n=200, M=64, sigma=0.01, K_true=4, rotate_z=True,
                                         shapes=["box", "cylinder", "cone", "cross"], seed=0))
    cfg = TrainConfig(K=4, D_max=0, M=64, epochs_proto=20, epochs_align=300, final_stage="align",
                      encoder_widths=(32, 64, 128), batch_size=16, seed=0)

    def accuracy(bank):
        return evalkit.clustering_accuracy(bank, evalkit.majority_label_map(bank, clouds), clouds)
    cb, acc = _stage_end_probe({19: "proto", 319: "align"}, accuracy)
    train(clouds, cfg, on_epoch=cb)
    gap = acc["align"] - acc["proto"]
    report(12, "non-aligned robustness", gap >= 0.2,
           f"proto {acc['proto']:.3f}, align {acc['align']:.3f}, gap {100 * gap:.1f} points")


# -------------------------------------------------------------------- 13
MODELNET = os.environ.get("LINSHAPE_MODELNET10")


@pytest.mark.longrun
@pytest.mark.skipif(not MODELNET, reason="set LINSHAPE_MODELNET10 to a ModelNet10 root to run")
def test_13_modelnet10_reproduction(report, tmp_path):
    root = Path(MODELNET)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    splits = {s: [(str(f), ci) for ci, c in enumerate(classes) for f in sorted((root / c / s).glob("*.off"))]
              for s in ("train", "test")}
    cache = os.environ.get("LINSHAPE_CACHE", str(tmp_path / "cache"))
    train_set = build_dataset(DatasetManifest(splits["train"], M=1024), cache)
    test_set = build_dataset(DatasetManifest(splits["test"], M=1024), cache)
    cfg = TrainConfig(K=10, D_max=5, basis="implicit", M=1024, seed=0)
    bank, _ = train(train_set, cfg)
    acc = evalkit.clustering_accuracy(bank, evalkit.majority_label_map(bank, train_set), test_set)
    n = bank.params.count()
    ok = 0.70 <= acc <= 0.85 and abs(n - 4.6e6) <= 0.46e6
    report(13, "ModelNet10 reproduction", ok, f"accuracy {acc:.3f}, {n} trainable parameters")
