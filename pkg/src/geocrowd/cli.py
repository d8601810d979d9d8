"""Command-line interface: ``geocrowd <subcommand> [options]``.

Subcommands
-----------
simulate    world config -> dataset.csv, annotations.csv, confusions.json, manifest.json
train       fit one method on a simulated world -> checkpoint + history.csv + metrics.json
baseline    majority vote or Dawid--Skene EM -> labels.csv (+ confusions.json) + metrics.json
evaluate    score a checkpoint on a world's test split -> metrics.json
ssc         SSC membership check of a matrix -> verdict printed + JSON
experiment  full trials x methods pipeline -> summary/raw/curve CSV + JSON

Metrics keys: ``n_eval``, ``raw_accuracy``, ``aligned_accuracy``,
``confusion_mse``, ``predictor_error``, ``kl_observed``, ``permutation``.
Validation labels used for early stopping and grid search are the clean
simulator labels.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``GEOCROWD_THREADS`` caps the worker processes of ``experiment``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__, formats, kernels
from .baselines import dawid_skene_em, majority_vote
from .errors import FormatError, GeocrowdError, InvalidArgumentError
from .geometry import evaluate, ssc_check
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    AGGREGATION_METHODS,
    TRAINED_METHODS,
    ExperimentConfig,
    WorldConfig,
    build_world,
    fit,
    is_missing,
    method_config,
    run_experiment,
    summarize,
)
from .trainer import TrainConfig, resume, train

log = logging.getLogger("geocrowd")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DATASET_FILE = "dataset.csv"
ANNOTATION_FILE = "annotations.csv"
CONFUSION_FILE = "confusions.json"


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


def _load_config(path):
    if path is None:
        return {}
    try:
        return formats.read_json(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except FormatError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _manifest(command, config, seeds, files, extra=None):
    m = {"schema_version": formats.SCHEMA_VERSION, "command": command, "version": __version__,
         "backend": kernels.BACKEND, "config": config, "seeds": seeds, "files": sorted(files)}
    if extra:
        m.update(extra)
    return m


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _world_from(cfg_dict, seed=None):
    d = dict(cfg_dict.get("world", cfg_dict))
    d.pop("schema_version", None)
    if seed is not None:
        d["seed"] = seed
    return WorldConfig.from_dict(d)


def cmd_simulate(args):
    wcfg = _world_from(_load_config(args.config), args.seed)
    world = build_world(wcfg)
    out = _out_dir(args.out)
    formats.write_dataset(os.path.join(out, DATASET_FILE), world.dataset)
    formats.write_annotations(os.path.join(out, ANNOTATION_FILE), world.annotations)
    formats.write_confusions(os.path.join(out, CONFUSION_FILE), world.ensemble)
    files = [DATASET_FILE, ANNOTATION_FILE, CONFUSION_FILE]
    formats.write_json(os.path.join(out, "manifest.json"),
                       _manifest("simulate", asdict(wcfg), world.seeds, files))
    print(f"wrote {len(world.annotations)} annotations for {world.dataset.N} items to {out}")
    return EXIT_OK


def _read_world(data_dir):
    ds = formats.read_dataset(os.path.join(data_dir, DATASET_FILE))
    ann = formats.read_annotations(os.path.join(data_dir, ANNOTATION_FILE))
    conf_path = os.path.join(data_dir, CONFUSION_FILE)
    ens = formats.read_confusions(conf_path) if os.path.exists(conf_path) else None
    return ds, ann, ens


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------


def _train_config(cfg_dict, seed=None):
    d = dict(cfg_dict.get("train", cfg_dict))
    d.pop("schema_version", None)
    cfg = TrainConfig.from_dict(d)
    return cfg if seed is None else replace(cfg, seed=seed)


def cmd_train(args):
    cfg = _train_config(_load_config(args.config), args.seed)
    ds, ann, ens = _read_world(args.data)
    true_A = ens.A if ens is not None else None
    out = _out_dir(args.out)
    ckpt = os.path.join(out, "checkpoint.gcm")
    if args.resume:
        if args.method in ("nn_mv", "nn_dsem"):
            raise UsageError("--resume is supported for crowd-layer methods only")
        mcfg = method_config(args.method, cfg)
        model, hist = resume(mcfg, ds, ann, args.resume, true_confusions=true_A,
                             checkpoint_path=ckpt)
    else:
        if args.method in ("nn_mv", "nn_dsem") or cfg.lam_grid or cfg.lr_grid:
            model, hist, _, _ = fit(args.method, cfg, ds, ann, true_A)
            save_checkpoint(model, ckpt)
        else:
            model, hist = train(method_config(args.method, cfg), ds, ann,
                                true_confusions=true_A, checkpoint_path=ckpt)
    hist.to_csv(os.path.join(out, "history.csv"))
    metrics = evaluate(model, ds, true_confusions=None if model.frozen else true_A,
                       annotations=None if model.frozen else ann)
    metrics["method"] = args.method
    formats.write_json(os.path.join(out, "metrics.json"), metrics)
    print(f"{args.method}: {len(hist)} epochs, test accuracy {metrics['raw_accuracy']:.4f}")
    return EXIT_OK


def cmd_evaluate(args):
    ds, ann, ens = _read_world(args.data)
    model = load_checkpoint(args.checkpoint)
    true_A = ens.A if ens is not None and not model.frozen else None
    metrics = evaluate(model, ds, true_confusions=true_A,
                       annotations=ann if true_A is not None else None)
    metrics["schema_version"] = formats.SCHEMA_VERSION
    if args.out:
        formats.write_json(os.path.join(_out_dir(args.out), "metrics.json"), metrics)
    _print_json(metrics)
    return EXIT_OK


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def cmd_baseline(args):
    ds, ann, ens = _read_world(args.data)
    out = _out_dir(args.out)
    annotated = np.unique(ann.item)
    if args.method == "mv":
        post, A_hat, extra = majority_vote(ann), None, {}
    else:
        cfg = _load_config(args.config)
        res = dawid_skene_em(ann, max_iter=int(cfg.get("max_iter", 100)),
                             tol=float(cfg.get("tol", 1e-6)))
        post, A_hat = res.posterior, res.confusions
        extra = {"iterations": res.iterations, "converged": res.converged,
                 "priors": res.priors.tolist()}
        formats.write_confusions(os.path.join(out, CONFUSION_FILE), A_hat,
                                 extra={"source": "ds_em"})
    formats.write_labels(os.path.join(out, "labels.csv"), post)
    metrics = evaluate(None, ds, items=annotated,
                       true_confusions=ens.A if (ens is not None and A_hat is not None) else None,
                       estimated_confusions=A_hat, F_hat=post.q[:, annotated])
    metrics.update(extra, method=args.method)
    formats.write_json(os.path.join(out, "metrics.json"), metrics)
    print(f"{args.method}: integrated-label accuracy {metrics['raw_accuracy']:.4f}"
          f" on {metrics['n_eval']} annotated items")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ssc
# ---------------------------------------------------------------------------


def _ssc_matrix(path, target):
    with open(path) as fh:
        head = fh.read(64)
    if head.startswith("# geocrowd-dataset"):
        if target != "F":
            raise UsageError("a dataset file only provides the F factor; use --target F")
        ds = formats.read_dataset(path)
        if ds.F_true is None:
            raise UsageError(f"{path} stores no posteriors")
        return ds.F_true[:, ds.indices("train")].T
    Z = formats.read_matrix(path)
    if str(path).endswith(".json") and target != "W":
        raise UsageError("a confusion file provides the W factor; use --target W")
    return Z


def advisory(target, verdict):
    """One-line regulariser suggestion from an SSC verdict."""
    if target == "W":
        if verdict.passed:
            return ("advice: stacked confusions look sufficiently scattered; geocrowd_w "
                    "(log-det on W) is the natural choice when annotators are many and items few")
        return ("advice: stacked confusions fail condition (i); prefer geocrowd_f if many items "
                "are annotated")
    if verdict.passed:
        return ("advice: classifier outputs look sufficiently scattered; geocrowd_f "
                "(log-det on F) is the natural choice when many items are annotated")
    return ("advice: classifier outputs fail condition (i); prefer geocrowd_w if there are "
            "near-class specialists among the annotators")


def cmd_ssc(args):
    Z = _ssc_matrix(args.matrix, args.target)
    v = ssc_check(Z, samples=args.samples, tol=args.tol, seed=args.seed or 0)
    d = v.to_dict()
    d.update(target=args.target, rows=int(Z.shape[0]), K=int(Z.shape[1]))
    print(f"ssc[{args.target}]: {v.verdict} ({v.failures}/{v.samples} failures, "
          f"max residual {v.max_residual:.3e}, {v.scope})")
    print(advisory(args.target, v))
    if args.out:
        out = args.out if args.out.endswith(".json") else os.path.join(_out_dir(args.out), "ssc.json")
        formats.write_json(out, d)
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def _csv_value(v):
    if is_missing(v):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path, rows, fields):
    with open(path, "w", newline="") as fh:
        fh.write(f"# geocrowd-table schema_version={formats.SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_csv_value(r.get(f)) for f in fields])


RAW_FIELDS = ("method", "p", "trial", "seed", "status", "test_accuracy", "aligned_accuracy",
              "confusion_mse", "predictor_error", "label_accuracy", "lam", "lr", "epochs",
              "max_colsum_dev", "error")


def cmd_experiment(args):
    raw_cfg = _load_config(args.config)
    if args.trials is not None:
        raw_cfg["trials"] = args.trials
    if args.seed is not None:
        raw_cfg.setdefault("world", {})["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(raw_cfg)
    out = _out_dir(args.out)
    rows = run_experiment(cfg)
    settings = cfg.settings()
    summary = summarize(rows, cfg.methods, settings)

    _write_rows(os.path.join(out, "raw.csv"), rows, RAW_FIELDS)
    sum_fields = ["method", "p", "trials", "failed"] + [
        f"{k}_{s}" for k in ("test_accuracy", "aligned_accuracy", "confusion_mse",
                             "predictor_error", "label_accuracy") for s in ("mean", "std", "median")
    ]
    _write_rows(os.path.join(out, "summary.csv"), summary, sum_fields)
    clean = [{k: v for k, v in r.items() if not k.startswith("_")} for r in rows]
    formats.write_json(os.path.join(out, "summary.json"),
                       {"config": cfg.to_dict(), "summary": summary, "raw": clean})

    curves = []
    for r in rows:
        for rec in getattr(r.get("_history"), "records", []):
            curves.append({"method": r["method"], "p": r["p"], "trial": r["trial"],
                           "epoch": rec.epoch, "loss": rec.loss, "data": rec.data,
                           "reg": rec.reg, "val_acc": rec.val_acc})
    _write_rows(os.path.join(out, "loss_curves.csv"), curves,
                ("method", "p", "trial", "epoch", "loss", "data", "reg", "val_acc"))
    files = ["raw.csv", "summary.csv", "summary.json", "loss_curves.csv"]
    if cfg.p_sweep:
        _write_rows(os.path.join(out, "p_sweep.csv"), summary,
                    ("method", "p", "test_accuracy_mean", "test_accuracy_std",
                     "confusion_mse_median", "confusion_mse_mean", "confusion_mse_std"))
        files.append("p_sweep.csv")
    seeds = {f"trial_{t}": cfg.world.seeds(t) for t in range(cfg.trials)}
    formats.write_json(os.path.join(out, "manifest.json"),
                       _manifest("experiment", cfg.to_dict(), seeds, files))

    for s in summary:
        acc, sd = s["test_accuracy_mean"], s["test_accuracy_std"]
        if acc is not None:
            acc_txt = f"acc {acc:.4f} +- {sd:.4f}"
        else:
            acc_txt = f"label acc {s['label_accuracy_mean']:.4f} +- {s['label_accuracy_std']:.4f}"
        mse = s["confusion_mse_mean"]
        mse_txt = f"{mse:.3e}" if mse is not None else "n/a"
        print(f"{s['method']:>14s} p={s['p']:<5g} {acc_txt}  confusion mse {mse_txt}"
              f"  failed {s['failed']}/{s['trials']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="geocrowd", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic crowdsourcing world")
    s.add_argument("--config", required=True, help="world JSON (or experiment JSON with 'world')")
    s.add_argument("--seed", type=int, help="override the world seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train one method on a simulated world")
    s.add_argument("--data", required=True, help="directory written by 'simulate'")
    s.add_argument("--method", required=True, choices=TRAINED_METHODS)
    s.add_argument("--config", help="train config JSON (TrainConfig fields, or under 'train')")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("baseline", help="majority vote or Dawid-Skene EM")
    s.add_argument("--data", required=True)
    s.add_argument("--method", required=True, choices=AGGREGATION_METHODS)
    s.add_argument("--config", help="optional JSON with max_iter, tol")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("evaluate", help="score a checkpoint on a world's test split")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ssc", help="sufficiently-scattered check of a matrix")
    s.add_argument("matrix", help="numeric CSV of rows Z, confusion JSON, or dataset CSV")
    s.add_argument("--target", choices=("F", "W"), required=True)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="verdict JSON file or directory")
    s.set_defaults(func=cmd_ssc)

    s = sub.add_parser("experiment", help="run trials x methods from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidArgumentError) as exc:
        parser.print_usage(sys.stderr)
        print(f"geocrowd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GeocrowdError, OSError) as exc:
        print(f"geocrowd {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
