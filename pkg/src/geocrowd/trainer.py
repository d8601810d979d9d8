"""Mini-batch training of a :class:`~geocrowd.model.CrowdModel`.

Each epoch shuffles the training items and walks them in batches. A batch's
data term covers every observed annotation of its items; the optional
regulariser sees the batch's classifier outputs (``logdet_F``) or the full
confusion stack (``logdet_W``, ``trace``). Parameters are updated with Adam
(decoupled weight decay) after clipping the global gradient norm.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import (
    InvalidArgumentError,
    NumericalDomainError,
    TrainingDivergedError,
)
from .model import (
    CrowdModel,
    backward,
    crowd_forward,
    init_model,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from .numerics import AdamState, Rng, adam_step
from .objective import (
    LossBreakdown,
    RegularizerSpec,
    ccem_data_loss,
    crowdlayer_loss,
    oracle_kl_loss,
    regularizer,
)
from .simulator import AnnotationSet, Dataset

log = logging.getLogger(__name__)

DATA_MODES = ("ccem", "crowdlayer", "oracle_kl")
DEFAULT_LAMBDA_GRID = (0.01, 0.001, 0.0001)
DEFAULT_LR_GRID = (0.01, 0.001)


@dataclass
class TrainConfig:
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    mode: str = "ccem"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    mu_init: float = 4.0
    hidden: tuple = (32,)
    frozen: bool = False
    clip_norm: float = 100.0
    lam_grid: tuple | None = None
    lr_grid: tuple | None = None

    def __post_init__(self):
        if isinstance(self.regularizer, dict):
            self.regularizer = RegularizerSpec(**self.regularizer)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.mode not in DATA_MODES:
            raise InvalidArgumentError(f"unknown data-term mode {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgumentError("batch_size and epochs must be >= 1")
        if self.lr <= 0:
            raise InvalidArgumentError("learning rate must be positive")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["regularizer"] = {
            "kind": self.regularizer.kind,
            "lam": self.regularizer.lam,
            "ridge": self.regularizer.ridge,
        }
        d["hidden"] = list(self.hidden)
        for k in ("lam_grid", "lr_grid"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("lam_grid", "lr_grid", "hidden"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    data: float
    reg: float
    val_acc: float | None
    seconds: float
    max_colsum_dev: float = 0.0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int | None = None

    CSV_FIELDS = ("epoch", "loss", "data", "reg", "val_acc", "seconds")

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise InvalidArgumentError("epoch indices must increase by one")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array(
            [np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records]
        )

    def to_csv(self, path=None, include_time=True):
        """Serialise as CSV; ``include_time=False`` drops the wall-clock column."""
        fields = self.CSV_FIELDS if include_time else self.CSV_FIELDS[:-1]
        buf = io.StringIO()
        buf.write("# geocrowd-history schema_version=1\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for r in self.records:
            row = []
            for f in fields:
                v = getattr(r, f)
                row.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def accuracy(model, X, y):
    if X.shape[1] == 0:
        return None
    return float(np.mean(np.argmax(predict_proba(model, X), axis=0) == y))


def _max_colsum_dev(model):
    return float(np.max(np.abs(model.A.sum(axis=1) - 1.0)))


def train(
    config: TrainConfig,
    dataset: Dataset,
    annotations: AnnotationSet,
    val_items=None,
    true_confusions=None,
    model: CrowdModel | None = None,
    resume_state: dict | None = None,
    checkpoint_path=None,
):
    """Fit a crowd model; returns ``(model, history)``.

    ``val_items`` defaults to the dataset's validation split; pass an empty
    array to disable validation and early stopping. ``true_confusions``
    (M x K x K) is required by the ``oracle_kl`` mode, which replaces the
    observed labels by the exact distributions ``A_m f_true(x_n)``.
    ``model``/``resume_state`` continue a previous run (see
    :func:`resume_state_from`).
    """
    if len(annotations) == 0:
        raise InvalidArgumentError("annotation set is empty")
    if annotations.n_items != dataset.N or annotations.K != dataset.K:
        raise InvalidArgumentError("annotation set does not match the dataset")
    if not np.all(np.isfinite(dataset.X)):
        raise InvalidArgumentError("dataset features contain NaN or Inf")
    cfg = config
    K, M = dataset.K, annotations.n_annotators
    train_items = dataset.indices("train")
    if val_items is None:
        val_items = dataset.indices("val")
    val_items = np.asarray(val_items, dtype=np.int64)
    X, y = dataset.X, dataset.y
    X_val, y_val = X[:, val_items], y[val_items]

    P_true = None
    if cfg.mode == "oracle_kl":
        if true_confusions is None or dataset.F_true is None:
            raise InvalidArgumentError("oracle_kl mode needs true confusions and F_true")
        P_true = kernels.gather_products(
            np.asarray(true_confusions, dtype=np.float64), dataset.F_true,
            annotations.item, annotations.annot,
        )

    rng = Rng(cfg.seed)
    if model is None:
        model = init_model(dataset.D, K, M, cfg.hidden, cfg.mu_init, rng.spawn(0), cfg.frozen)
    if model.M != M or model.K != K or model.D != dataset.D:
        raise InvalidArgumentError("model shape does not match data")
    params = model.parameters()
    adam = AdamState.zeros_like(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    mask = [True] * (len(params) - 1) + [not model.frozen]
    history = TrainHistory()
    start_epoch = 0
    best = (-math.inf, None, None)  # (val acc, epoch, snapshot)
    stale = 0
    if resume_state is not None:
        start_epoch = int(resume_state["epoch"])
        adam.step = int(resume_state["adam_step"])
        adam.m = [np.array(a, dtype=np.float64) for a in resume_state["adam_m"]]
        adam.v = [np.array(a, dtype=np.float64) for a in resume_state["adam_v"]]
        for rec in resume_state.get("history", []):
            history.records.append(EpochRecord(**rec))
        history.stopped_early = bool(resume_state.get("stopped_early", False))
        if resume_state.get("best_epoch") is not None:
            # the stored model is the best snapshot; training continues from the last iterate
            best = (float(resume_state["best_val"]), int(resume_state["best_epoch"]), model.copy())
        for dst, src in zip(params, resume_state.get("live_params") or []):
            dst[...] = src
        model.refresh()
        stale = int(resume_state.get("stale", 0))

    offsets = annotations.offsets
    for epoch in range(start_epoch, cfg.epochs if not history.stopped_early else start_epoch):
        t0 = time.perf_counter()
        order = rng.spawn(1, epoch).gen.permutation(train_items)
        sums = np.zeros(3)
        n_batches = 0
        col_dev = 0.0
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            lens = offsets[batch + 1] - offsets[batch]
            terms = annotations.terms_for(batch)
            local = np.repeat(np.arange(batch.size), lens)
            try:
                P, cache = crowd_forward(model, X[:, batch], local, annotations.annot[terms])
                labels = annotations.label[terms]
                if cfg.mode == "ccem":
                    data, dP = ccem_data_loss(P, labels)
                elif cfg.mode == "crowdlayer":
                    data, dP = crowdlayer_loss(P, labels)
                else:
                    data, dP = oracle_kl_loss(P_true[terms], P)
                reg, dF, dA = regularizer(cfg.regularizer, cache.F, model.A)
            except (NumericalDomainError, InvalidArgumentError) as exc:
                # inputs were validated up front, so this is blow-up
                raise TrainingDivergedError(epoch, b, str(exc)) from exc
            total = data + reg
            if not math.isfinite(total):
                raise TrainingDivergedError(epoch, b, f"data={data}, reg={reg}")
            grads = backward(model, cache, dP, dF, dA)
            norm = grads.global_norm()
            if not math.isfinite(norm):
                raise TrainingDivergedError(epoch, b, "non-finite gradient norm")
            if norm > cfg.clip_norm:
                grads.scale(cfg.clip_norm / norm)
            adam_step(params, grads.as_list(), adam, mask)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingDivergedError(epoch, b, "non-finite parameters after update")
            model.refresh()
            col_dev = max(col_dev, _max_colsum_dev(model))
            sums += (total, data, reg)
            n_batches += 1
        mean = sums / max(n_batches, 1)
        try:
            with np.errstate(over="ignore"):
                val_acc = accuracy(model, X_val, y_val)
        except (NumericalDomainError, InvalidArgumentError) as exc:
            raise TrainingDivergedError(epoch, n_batches, f"validation pass: {exc}") from exc
        history.append(
            EpochRecord(epoch, float(mean[0]), float(mean[1]), float(mean[2]), val_acc,
                        time.perf_counter() - t0, col_dev)
        )
        log.debug("epoch %d loss %.6f val %s", epoch, mean[0], val_acc)
        if val_acc is not None:
            if val_acc > best[0]:
                best = (val_acc, epoch, model.copy())
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    history.stopped_early = True
                    break
    history.best_epoch = best[1]
    state = resume_state_from(history, adam, stale, best[0])
    if best[2] is not None and best[1] != history.records[-1].epoch:
        state["live_params"] = [p.copy() for p in params]
        for dst, src in zip(params, best[2].parameters()):
            dst[...] = src
        model.refresh()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, state)
    return model, history


def resume_state_from(history: TrainHistory, adam: AdamState, stale=0, best_val=None):
    """Everything beyond the model weights needed to continue a run exactly.

    ``live_params`` (added by :func:`train` when the returned model is an
    earlier best snapshot) holds the last iterate that optimisation resumes from.
    """
    return {
        "epoch": history.records[-1].epoch + 1 if history.records else 0,
        "adam_step": adam.step,
        "adam_m": adam.m,
        "adam_v": adam.v,
        "history": [r.__dict__ for r in history.records],
        "best_epoch": history.best_epoch,
        "best_val": best_val if history.best_epoch is not None else None,
        "stale": stale,
        "stopped_early": history.stopped_early,
    }


def resume(config, dataset, annotations, source, **kw):
    """Continue a run that :func:`train` saved to the checkpoint ``source``.

    Keyword arguments go to :func:`train`; the epoch budget in ``config`` is
    the total, so numbering continues where the saved run stopped.
    """
    model, state = load_checkpoint(source, with_state=True)
    if state is None:
        raise InvalidArgumentError(f"{source} holds no training state to resume")
    return train(config, dataset, annotations, model=model, resume_state=state, **kw)


@dataclass
class GridCell:
    lam: float
    lr: float
    val_acc: float | None
    diverged: bool
    model: CrowdModel | None = None
    history: TrainHistory | None = None


@dataclass
class GridResult:
    best: GridCell
    cells: list


def grid_search(config: TrainConfig, dataset, annotations, val_items=None, true_confusions=None):
    """Train one model per (lambda, lr) cell and keep the best on validation.

    Every cell uses ``config.seed``. Diverged cells are skipped; ties go to
    the smaller lambda, then the smaller learning rate.
    """
    lams = config.lam_grid if config.lam_grid is not None else (config.regularizer.lam,)
    lrs = config.lr_grid if config.lr_grid is not None else (config.lr,)
    if not lams or not lrs:
        raise InvalidArgumentError("grid search needs non-empty grids")
    if val_items is None:
        val_items = dataset.indices("val")
    if len(val_items) == 0:
        raise InvalidArgumentError("grid search needs a validation split")
    cells = []
    for lam in sorted(lams):
        for lr in sorted(lrs):
            cfg = replace(config, regularizer=replace(config.regularizer, lam=lam), lr=lr,
                          lam_grid=None, lr_grid=None)
            try:
                model, hist = train(cfg, dataset, annotations, val_items, true_confusions)
            except TrainingDivergedError as exc:
                log.info("grid cell lam=%g lr=%g diverged: %s", lam, lr, exc)
                cells.append(GridCell(lam, lr, None, True))
                continue
            score = max((r.val_acc for r in hist.records if r.val_acc is not None), default=None)
            cells.append(GridCell(lam, lr, score, False, model, hist))
    ok = [c for c in cells if not c.diverged]
    if not ok:
        raise TrainingDivergedError(-1, -1, "every grid cell diverged")
    best = ok[0]
    for c in ok[1:]:
        if c.val_acc > best.val_acc:
            best = c
    return GridResult(best, cells)
