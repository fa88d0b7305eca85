"""Command line entry point: ``linshape {synth, train, eval-cluster,
segment, features, export}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import evalkit
from .datakit import (RunRecord, SynthSpec, export_family_sweep, export_prototypes, hash_inputs,
                      load_cloudset, save_cloudset, synth_generate)
from .errors import InvalidInputError
from .shapebank import ModelBank, Stage, assign_dataset
from .trainer import TrainConfig, compute_bic, train

log = logging.getLogger("linshape")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def _out_dir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _config_snapshot(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


# --------------------------------------------------------------- commands
def cmd_synth(args):
    spec = dict(_read_json(args.spec)) if args.spec else {}
    if args.kind:
        spec["kind"] = args.kind
    if args.seed is not None:
        spec["seed"] = args.seed
    spec = SynthSpec.from_dict(spec)
    clouds, truth = synth_generate(spec)
    out = _out_dir(args)
    save_cloudset(out, clouds, truth, extra={"synth": dataclass_dict(spec)})
    RunRecord("synth", dataclass_dict(spec), hash_inputs([args.spec] if args.spec else [])).write(
        os.path.join(out, "run.json"))
    print(f"wrote {len(clouds)} clouds to {out}")
    return 0


def dataclass_dict(obj):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(obj).items()}


def cmd_train(args):
    cfg = dict(_read_json(args.config)) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    data = load_cloudset(args.data)
    cfg.setdefault("M", len(data[0].points))
    config = TrainConfig.from_dict(cfg)
    out = _out_dir(args)
    t0 = time.perf_counter()
    bank, hist = train(data, config, history_path=os.path.join(out, "history.jsonl"),
                       checkpoint_dir=out if args.stage_checkpoints else None)
    bank.metadata["data"] = os.path.abspath(args.data)
    final = os.path.join(out, "final.ckpt")
    bank.save(final, extra={"train_config": config.to_dict()})
    X = np.stack([c.points for c in data])
    _, d = assign_dataset(bank, X)
    metrics = {"mean_cd": float(d.mean()), "mean_cd_x1e3": float(d.mean() * 1e3),
               "stages": [[label, loss] for label, loss in hist.stages],
               "bic": compute_bic(data, bank, float(d.mean())).value}
    if all(c.class_id is not None for c in data):
        lm = evalkit.majority_label_map(bank, data)
        metrics["label_map"] = {str(k): int(v) for k, v in lm.items()}
        metrics["accuracy"] = evalkit.clustering_accuracy(bank, lm, data)
    _write_json(os.path.join(out, "metrics.json"), metrics)
    RunRecord("train", {"train_config": config.to_dict(), "args": _config_snapshot(args)},
              hash_inputs([args.data] + ([args.config] if args.config else [])), metrics,
              [final, final + ".json"], {**hist.timings, "wall": time.perf_counter() - t0}).write(
        os.path.join(out, "run.json"))
    msg = f"mean_cd_x1e3={metrics['mean_cd_x1e3']:.4f}"
    if "accuracy" in metrics:
        msg = f"accuracy={metrics['accuracy']:.4f} " + msg
    print(msg)
    return 0


def _bank_data(args, bank):
    path = args.data or bank.metadata.get("data")
    if not path:
        raise InvalidInputError("no --data given and the bank does not record its training data")
    return path, load_cloudset(path)


def cmd_eval_cluster(args):
    bank = ModelBank.load(args.bank)
    _, test = _bank_data(args, bank)
    train_set = load_cloudset(args.train) if args.train else test
    lm = evalkit.majority_label_map(bank, train_set)
    acc = evalkit.clustering_accuracy(bank, lm, test)
    cd = evalkit.mean_cd(bank, test)
    result = {"accuracy": acc, "mean_cd": cd, "mean_cd_x1e3": cd * 1e3}
    print(f"accuracy={acc:.4f} mean_cd_x1e3={cd * 1e3:.4f}")
    if args.out:
        _write_json(os.path.join(_out_dir(args), "eval_cluster.json"), result)
    return 0


def cmd_segment(args):
    bank = ModelBank.load(args.bank)
    _, test = _bank_data(args, bank)
    train_set = load_cloudset(args.train) if args.train else test
    if any(c.labels is None for c in train_set):
        raise InvalidInputError("segmentation needs per-point labels on the annotation set")
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    X = np.stack([c.points for c in train_set])
    assigned, _ = assign_dataset(bank, X)
    annotations = {}
    for k in range(bank.K):
        mine = np.flatnonzero(assigned == k)
        if len(mine) == 0:
            continue
        pick = rng.choice(mine, size=min(args.shots, len(mine)), replace=False)
        if args.annotate == "random":
            annotations[k] = evalkit.annotate_prototype_random(bank, k, train_set[pick[0]])
        else:
            annotations[k] = evalkit.annotate_prototype_majority(bank, k, [train_set[i] for i in pick])
    results = [evalkit.segment(bank, annotations, c) for c in test]
    summary = evalkit.write_segmentation(_out_dir(args), results, [c.class_id for c in test])
    print(f"overall_miou={summary['overall_miou']:.4f}")
    return 0


def cmd_features(args):
    bank = ModelBank.load(args.bank)
    _, data = _bank_data(args, bank)
    out = _out_dir(args)
    X = np.stack([c.points for c in data])
    feats = [evalkit.extract_features(bank, X[s:s + 64], args.temperature) for s in range(0, len(X), 64)]
    classes = [c.class_id for c in data]
    for name in ("distances", "distances_coords", "embedding"):
        arr = np.concatenate([getattr(f, name) for f in feats])
        evalkit.write_features_csv(os.path.join(out, f"{name}.csv"), arr, classes)
    print(f"wrote features for {len(X)} samples to {out}")
    return 0


def cmd_export(args):
    bank = ModelBank.load(args.bank)
    out = _out_dir(args)
    paths = export_prototypes(bank, out)
    if args.sweep and bank.stage == Stage.FULL and bank.D > 0:
        _, data = _bank_data(args, bank)
        models = range(bank.K) if args.sweep == "all" else [int(k) for k in args.sweep.split(",")]
        X = np.stack([c.points for c in data])
        assigned, _ = assign_dataset(bank, X)
        for k in models:
            if not np.any(assigned == k):
                log.warning("model %d has no assigned samples; skipping its sweep", k)
                continue
            paths += export_family_sweep(bank, k, range(bank.D), data, out)
    print(f"wrote {len(paths)} files to {out}")
    return 0


# ----------------------------------------------------------------- parser
def build_parser():
    p = argparse.ArgumentParser(prog="linshape", description="Learned linear shape families for point clouds")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="JSON generator spec")
    s.add_argument("--kind", help="generator kind (overrides the --spec file)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model bank")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON training config (keys mirror TrainConfig)")
    s.add_argument("--stage-checkpoints", action="store_true", help="checkpoint every stage boundary into --out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-cluster", help="clustering accuracy and reconstruction error")
    s.add_argument("--bank", required=True)
    s.add_argument("--data")
    s.add_argument("--train", help="labeled set for the majority label map (default: --data)")
    s.set_defaults(func=cmd_eval_cluster)

    s = sub.add_parser("segment", help="label-transfer part segmentation")
    s.add_argument("--bank", required=True)
    s.add_argument("--data")
    s.add_argument("--train", help="labeled annotation set (default: --data)")
    s.add_argument("--annotate", choices=("random", "majority"), default="majority")
    s.add_argument("--shots", type=int, default=10)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("features", help="export self-supervised features as CSV")
    s.add_argument("--bank", required=True)
    s.add_argument("--data")
    s.add_argument("--temperature", type=float, default=evalkit.DEFAULT_TEMPERATURE)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("export", help="write prototype and family sweep PLY files")
    s.add_argument("--bank", required=True)
    s.add_argument("--data")
    s.add_argument("--sweep", help="'all' or comma separated model indices")
    s.set_defaults(func=cmd_export)

    for name, sp in sub.choices.items():
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=name in ("synth", "train", "segment", "features", "export"))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # single machine-parsable line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
