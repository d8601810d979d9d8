"""Experiment plumbing shared by the command line and the acceptance suite.

A *world* is a simulated dataset, its true confusions and a sampled
annotation set. A *method* turns a world into estimates; :func:`run_method`
scores them on the test split and returns a flat metrics row.

Seeds: trial ``t`` of a world with base seed ``s`` draws the mixture with
``s + t``, the confusions with ``s + t + 100`` and the annotation mask with
``s + t + 200``; training uses ``s + t``.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baselines import dawid_skene_em, integrated_annotations, majority_vote
from .errors import GeocrowdError, InvalidArgumentError
from .geometry import evaluate
from .objective import RegularizerSpec
from .simulator import AnnotationSet, ConfusionEnsemble, Dataset, gen_confusions, gen_mixture_dataset, sample_annotations
from .trainer import TrainConfig, grid_search, train

TRAINED_METHODS = ("geocrowd_f", "geocrowd_w", "unregularized", "tracereg", "crowdlayer",
                   "nn_mv", "nn_dsem")
AGGREGATION_METHODS = ("ds_em", "mv")
METHODS = TRAINED_METHODS + AGGREGATION_METHODS
DEFAULT_LAMBDA = 0.001

_REG_KIND = {"geocrowd_f": "logdet_F", "geocrowd_w": "logdet_W", "tracereg": "trace"}


@dataclass
class WorldConfig:
    K: int = 3
    D: int = 5
    N: int = 500
    M: int = 5
    p: float = 0.1
    n_val: int = 100
    n_test: int = 500
    separation: float = 3.0
    weights: list | None = None
    cov_scale: float = 1.0
    confusions: dict = field(default_factory=lambda: {"kind": "dirichlet", "alpha": 1.0,
                                                      "boost": 0.3})
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise InvalidArgumentError(
                f"observation probability p must be in (0, 1], got {self.p}; "
                "p = 0 would leave every item unannotated"
            )
        if self.K < 2 or self.M < 1 or self.N < self.K:
            raise InvalidArgumentError("world needs K >= 2, M >= 1 and N >= K")
        if "kind" not in self.confusions:
            raise InvalidArgumentError("confusion spec needs a 'kind'")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown world keys: {sorted(unknown)}")
        return cls(**d)

    def seeds(self, trial=0):
        s = self.seed + trial
        return {"dataset": s, "confusions": s + 100, "annotations": s + 200, "train": s}


@dataclass
class World:
    dataset: Dataset
    ensemble: ConfusionEnsemble
    annotations: AnnotationSet
    seeds: dict


def build_world(cfg: WorldConfig, trial=0, p=None):
    """Simulate trial ``trial``; ``p`` overrides the observation probability."""
    seeds = cfg.seeds(trial)
    ds = gen_mixture_dataset(cfg.K, cfg.D, cfg.N, cfg.separation, cfg.weights, seeds["dataset"],
                             cfg.n_val, cfg.n_test, cfg.cov_scale)
    ens = gen_confusions(cfg.confusions, cfg.K, cfg.M, seeds["confusions"])
    p = cfg.p if p is None else p
    ann = sample_annotations(ds, ens, p, seeds["annotations"])
    return World(ds, ens, ann, seeds)


def method_config(method, base: TrainConfig):
    """Training configuration ``method`` uses, derived from ``base``."""
    if method not in TRAINED_METHODS:
        raise InvalidArgumentError(f"unknown trained method {method!r}; expected one of {TRAINED_METHODS}")
    lam = base.regularizer.lam if base.regularizer.lam > 0 else DEFAULT_LAMBDA
    ridge = base.regularizer.ridge
    # oracle_kl is a data-term choice that the crowd methods honour
    mode = "oracle_kl" if base.mode == "oracle_kl" else "ccem"
    if method in _REG_KIND:
        reg = RegularizerSpec(_REG_KIND[method], lam, ridge)
        return replace(base, regularizer=reg, mode=mode, frozen=False)
    cfg = replace(base, regularizer=RegularizerSpec("none", 0.0, ridge), lam_grid=None)
    if method == "crowdlayer":
        return replace(cfg, mode="crowdlayer", frozen=False)
    if method == "unregularized":
        return replace(cfg, mode=mode, frozen=False)
    return replace(cfg, mode="ccem", frozen=True)


def fit(method, cfg: TrainConfig, dataset, annotations, true_confusions=None):
    """Train ``method``; returns ``(model, history, chosen lam, chosen lr)``.

    Uses :func:`~geocrowd.trainer.grid_search` when the config carries grids.
    The integrated-label methods first aggregate the crowd labels and train
    with a single frozen identity confusion.
    """
    mcfg = method_config(method, cfg)
    ann = annotations
    if method in ("nn_mv", "nn_dsem"):
        post = majority_vote(annotations) if method == "nn_mv" else dawid_skene_em(annotations).posterior
        ann = integrated_annotations(post, np.unique(annotations.item))
        true_confusions = None
    if mcfg.lam_grid is not None or mcfg.lr_grid is not None:
        res = grid_search(mcfg, dataset, ann, true_confusions=true_confusions)
        b = res.best
        return b.model, b.history, b.lam, b.lr
    model, hist = train(mcfg, dataset, ann, true_confusions=true_confusions)
    return model, hist, mcfg.regularizer.lam, mcfg.lr


def run_method(method, world: World, base: TrainConfig, keep_model=False):
    """Fit and score one method on one world; returns a metrics row (dict).

    Runtime failures are caught and recorded in ``status``/``error`` so an
    experiment grid keeps going.
    """
    ds, ens, ann = world.dataset, world.ensemble, world.annotations
    row = {"method": method, "seed": world.seeds["train"], "status": "ok", "error": ""}
    try:
        if method in AGGREGATION_METHODS:
            row.update(_score_aggregation(method, ds, ens, ann))
            return row
        cfg = replace(base, seed=world.seeds["train"])
        model, hist, lam, lr = fit(method, cfg, ds, ann, ens.A)
        ev = evaluate(model, ds, true_confusions=ens.A if not model.frozen else None)
        row.update(
            test_accuracy=ev.get("raw_accuracy"),
            aligned_accuracy=ev.get("aligned_accuracy"),
            confusion_mse=ev.get("confusion_mse"),
            predictor_error=ev.get("predictor_error"),
            lam=lam, lr=lr, epochs=len(hist),
            max_colsum_dev=max(r.max_colsum_dev for r in hist.records),
        )
        row["_history"] = hist
        if keep_model:
            row["_model"] = model
    except GeocrowdError as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def _score_aggregation(method, ds, ens, ann):
    annotated = np.unique(ann.item)
    if method == "mv":
        q, A_hat = majority_vote(ann).q, None
    else:
        res = dawid_skene_em(ann)
        q, A_hat = res.posterior.q, res.confusions
    ev = evaluate(None, ds, items=annotated, true_confusions=ens.A if A_hat is not None else None,
                  estimated_confusions=A_hat, F_hat=q[:, annotated])
    return {"label_accuracy": ev["raw_accuracy"], "confusion_mse": ev.get("confusion_mse")}


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    world: WorldConfig
    methods: list
    train: TrainConfig = field(default_factory=TrainConfig)
    method_train: dict = field(default_factory=dict)
    trials: int = 5
    p_sweep: list | None = None
    name: str = "experiment"

    def __post_init__(self):
        if self.trials < 1:
            raise InvalidArgumentError("trial count must be >= 1")
        if not self.methods:
            raise InvalidArgumentError("experiment needs at least one method")
        bad = [m for m in self.methods if m not in METHODS]
        bad += [m for m in self.method_train if m not in METHODS]
        if bad:
            raise InvalidArgumentError(f"unrecognised method(s) {bad}; expected one of {METHODS}")
        for p in self.p_sweep or ():
            WorldConfig.from_dict({**asdict(self.world), "p": p})

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("schema_version", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown experiment keys: {sorted(unknown)}")
        if "world" not in d or "methods" not in d:
            raise InvalidArgumentError("experiment config needs 'world' and 'methods'")
        d["world"] = WorldConfig.from_dict(d["world"])
        d["train"] = TrainConfig.from_dict(d.get("train", {}))
        return cls(**d)

    def to_dict(self):
        return {
            "schema_version": 1, "name": self.name, "world": asdict(self.world),
            "methods": list(self.methods), "train": self.train.to_dict(),
            "method_train": self.method_train, "trials": self.trials, "p_sweep": self.p_sweep,
        }

    def train_config(self, method):
        over = self.method_train.get(method)
        if not over:
            return self.train
        return TrainConfig.from_dict({**self.train.to_dict(), **over})

    def settings(self):
        return list(self.p_sweep) if self.p_sweep else [self.world.p]


def _run_cell(args):
    cfg, method, p, trial = args
    world = build_world(cfg.world, trial, p)
    row = run_method(method, world, cfg.train_config(method))
    row.update(p=p, trial=trial)
    return row


def run_experiment(cfg: ExperimentConfig, threads=None):
    """All (setting, trial, method) cells; rows come back in a fixed order.

    ``threads`` (default ``GEOCROWD_THREADS`` or 1) caps the worker
    processes. Every cell is independent, so results do not depend on it.
    """
    cells = [(cfg, m, p, t) for p in cfg.settings() for t in range(cfg.trials) for m in cfg.methods]
    if threads is None:
        threads = int(os.environ.get("GEOCROWD_THREADS", "1") or 1)
    if threads > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(_run_cell, cells))
    return [_run_cell(c) for c in cells]


SUMMARY_METRICS = ("test_accuracy", "aligned_accuracy", "confusion_mse", "predictor_error",
                   "label_accuracy")


def summarize(rows, methods, settings):
    """Mean and sample standard deviation per (method, setting)."""
    out = []
    for p in settings:
        for m in methods:
            cell = [r for r in rows if r["method"] == m and r["p"] == p]
            ok = [r for r in cell if r["status"] == "ok"]
            s = {"method": m, "p": p, "trials": len(cell), "failed": len(cell) - len(ok)}
            for key in SUMMARY_METRICS:
                vals = np.array([r[key] for r in ok if r.get(key) is not None], dtype=np.float64)
                s[f"{key}_mean"] = float(vals.mean()) if vals.size else None
                s[f"{key}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else None)
                s[f"{key}_median"] = float(np.median(vals)) if vals.size else None
            out.append(s)
    return out


def is_missing(v):
    return v is None or (isinstance(v, float) and math.isnan(v))
