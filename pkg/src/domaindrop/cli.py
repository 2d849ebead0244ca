"""``domaindrop`` command line: gen-data, train, eval, analyze.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 training error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .analysis import channel_sensitivity, divergence_report
from .config import VARIANT_NAMES, TrainConfig, parse_layers, read_kv
from .errors import CheckpointError, ConfigError, DataError, TrainingError
from .estimator import DomainDropClassifier

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    raw = read_kv(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = D.DataSpec.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = D.generate(spec)
    D.save_csv(ds, out / "dataset.csv")
    D.save_binary(ds, out / "dataset.bin")
    _write_json(out / "manifest.json", {"spec": spec.to_dict(), "seed": spec.seed,
                                        "format_version": D.FORMAT_VERSION,
                                        "files": ["dataset.csv", "dataset.bin"]})
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    raw = read_kv(args.config)
    for key in ("seed", "variant", "out"):
        if getattr(args, key, None) is not None:
            raw[key] = getattr(args, key)
    if args.layer_set is not None:
        raw["candidate_layers"] = args.layer_set
    return TrainConfig.from_dict(raw)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = D.load(cfg.dataset)
    split = D.split_leave_one_out(ds, cfg.target_domain, cfg.val_fraction, cfg.seed)
    tr, va, tg = split["train"], split["val"], split["target"]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    clf = DomainDropClassifier(**cfg.estimator_params())
    with open(out / "metrics.jsonl", "w") as fh:
        def sink(rec):
            if rec["kind"] == "epoch":
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

        clf.fit(tr.X, tr.y, tr.domains, va.X, va.y, tg.X, tg.y, metrics=sink)
        final = {"kind": "final", "best_epoch": clf.best_epoch_,
                 "val_acc": clf.score(va.X, va.y) if len(va) else None,
                 "target_acc": clf.score(tg.X, tg.y),
                 "target_domain": ds.domain_names[ds.domain_index(cfg.target_domain)]}
        fh.write(json.dumps(final, sort_keys=True) + "\n")
    with open(out / "iterations.jsonl", "w") as fh:
        for rec in clf.history_:
            if rec["kind"] == "iter":
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    # the output location is not part of the run's identity
    provenance = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    clf.save(out / "model.ckpt", extra={"config": provenance, "domain_names": ds.domain_names})
    _write_json(out / "config.json", cfg.to_dict())
    print(f"target_accuracy={final['target_acc']:.6f} best_epoch={clf.best_epoch_}")
    return EXIT_OK


def _load_model(path) -> DomainDropClassifier:
    return DomainDropClassifier.load(path)


def _check_compatible(clf: DomainDropClassifier, ds: D.DomainDataset) -> None:
    if tuple(ds.dims) != tuple(clf.input_shape_):
        raise CheckpointError(f"dataset sample shape {ds.dims} does not match model input {clf.input_shape_}")


def cmd_eval(args) -> int:
    clf = _load_model(args.checkpoint)
    ds = D.load(args.dataset)
    _check_compatible(clf, ds)
    sub = ds.subset(np.flatnonzero(ds.domains == ds.domain_index(args.domain))) if args.domain is not None else ds
    acc = float(clf.score(sub.X, sub.y))
    result = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
              "domain": args.domain, "n": len(sub), "accuracy": acc}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", result)
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["domain", "n", "accuracy"])
            w.writerow([args.domain if args.domain is not None else "all", len(sub), repr(acc)])
    print(f"accuracy={acc:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    clf = _load_model(args.checkpoint)
    ds = D.load(args.dataset)
    _check_compatible(clf, ds)
    target = args.target
    if target is None:
        target = clf.meta_.get("extra", {}).get("config", {}).get("target_domain")
    if target is None:
        raise ConfigError("no target domain given and none recorded in the checkpoint")
    t = ds.domain_index(target)
    sources = {ds.domain_names[k]: ds.X[ds.domains == k] for k in range(len(ds.domain_names)) if k != t}
    layers = parse_layers(args.layer_set)
    if layers is None:
        layers = (clf.backbone_.n_layers - 1,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for layer in layers:
        report = divergence_report(clf, sources, (ds.domain_names[t], ds.X[ds.domains == t]), layer)
        stats = channel_sensitivity(clf, list(sources.values()), layer)
        report.extra["channel_stddev_mean"] = stats.mean_stddev
        report.write(out / f"divergence_layer{report.layer}.json", out / f"divergence_layer{report.layer}.csv")
        with open(out / f"channels_layer{stats.layer}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["channel", "stddev"] + [f"mean_{n}" for n in sources])
            for c in range(len(stats.stddev)):
                w.writerow([c, repr(float(stats.stddev[c]))] + [repr(float(v)) for v in stats.domain_means[:, c]])
        summary.append(report.to_json())
        print(f"layer {report.layer}: beta_hat={report.beta:.6f} gamma_hat={report.gamma:.6f} "
              f"channel_stddev={stats.mean_stddev:.6f}")
    _write_json(out / "analysis.json", {"layers": summary})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="domaindrop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    g.add_argument("--config", help="data spec file (key = value); defaults used when omitted")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one leave-one-domain-out run")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=VARIANT_NAMES)
    t.add_argument("--layer-set", help="comma-separated candidate layers, or 'all'")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--domain", help="domain name or index; all samples when omitted")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="divergence and channel-sensitivity reports")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--target", help="held-out domain; read from the checkpoint when omitted")
    a.add_argument("--layer-set", help="comma-separated layers (default: last)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, IndexError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
