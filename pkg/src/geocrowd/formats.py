"""On-disk formats for worlds, estimates and metrics.

Every file carries a schema version. Tabular data is CSV with a leading
``#`` comment line holding the header metadata; floats are written with
``repr`` so a write/read cycle is lossless.

========================  =====================================================
file                      layout
========================  =====================================================
dataset CSV               ``# geocrowd-dataset {json}`` then columns
                          ``item_id, split, label, x_0..x_{D-1}[, f_0..f_{K-1}]``
annotation CSV            ``# geocrowd-annotations {json}`` then
                          ``item_id, annotator_id, label`` (0-based)
confusion JSON            ``{"schema_version", "K", "matrices": [{"tag",
                          "matrix"}]}``; matrices are K x K, row-major
labels CSV                ``# geocrowd-labels {json}`` then
                          ``item_id, hard_label, q_1..q_K``
metrics / manifest JSON   flat object with ``schema_version``
========================  =====================================================
"""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import FormatError
from .simulator import SPLITS, AnnotationSet, ConfusionEnsemble, Dataset

SCHEMA_VERSION = 1


def _fmt(v):
    return repr(float(v))


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _read_header(fh, kind):
    first = fh.readline()
    prefix = f"# geocrowd-{kind} "
    if not first.startswith(prefix):
        raise FormatError(f"{getattr(fh, 'name', '?')}: not a geocrowd {kind} file")
    try:
        meta = json.loads(first[len(prefix):])
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed {kind} header: {exc}") from exc
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported {kind} schema version {meta.get('schema_version')!r}")
    return meta


def _header_line(kind, meta):
    return f"# geocrowd-{kind} " + json.dumps({"schema_version": SCHEMA_VERSION, **meta},
                                               sort_keys=True) + "\n"


class _Lines:
    """Minimal writer collecting CSV rows into a string."""

    def __init__(self, head):
        self.parts = [head]

    def row(self, values):
        self.parts.append(",".join(values) + "\n")

    def text(self):
        return "".join(self.parts)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def write_dataset(path, ds: Dataset):
    has_f = ds.F_true is not None
    meta = {"K": ds.K, "D": ds.D, "N": ds.N, "has_posteriors": has_f, "generator": ds.meta}
    out = _Lines(_header_line("dataset", meta))
    cols = ["item_id", "split", "label"] + [f"x_{d}" for d in range(ds.D)]
    if has_f:
        cols += [f"f_{k}" for k in range(ds.K)]
    out.row(cols)
    for n in range(ds.N):
        vals = [str(n), SPLITS[ds.split[n]], str(int(ds.y[n]))]
        vals += [_fmt(v) for v in ds.X[:, n]]
        if has_f:
            vals += [_fmt(v) for v in ds.F_true[:, n]]
        out.row(vals)
    _write_text(path, out.text())


def read_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        meta = _read_header(fh, "dataset")
        rows = list(csv.reader(fh))
    try:
        K, D, N = int(meta["K"]), int(meta["D"]), int(meta["N"])
        header, body = rows[0], rows[1:]
        if len(body) != N:
            raise FormatError(f"dataset header says N={N} but file has {len(body)} rows")
        ncol = 3 + D + (K if meta["has_posteriors"] else 0)
        if len(header) != ncol or any(len(r) != ncol for r in body):
            raise FormatError("dataset rows have the wrong number of columns")
        ids = np.array([int(r[0]) for r in body])
        if not np.array_equal(ids, np.arange(N)):
            raise FormatError("dataset item ids must be 0..N-1 in order")
        split = np.array([SPLITS.index(r[1]) for r in body], dtype=np.int64)
        y = np.array([int(r[2]) for r in body], dtype=np.int64)
        num = np.array([[float(v) for v in r[3:]] for r in body]).reshape(N, ncol - 3)
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed dataset file {path}: {exc}") from exc
    X = num[:, :D].T
    F = num[:, D:].T.copy() if meta["has_posteriors"] else None
    return Dataset(X, y, K, F, split, dict(meta.get("generator", {})))


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------


def write_annotations(path, ann: AnnotationSet):
    meta = {"n_items": ann.n_items, "n_annotators": ann.n_annotators, "K": ann.K,
            "n_annotations": len(ann)}
    out = _Lines(_header_line("annotations", meta))
    out.row(["item_id", "annotator_id", "label"])
    for i, m, y in zip(ann.item.tolist(), ann.annot.tolist(), ann.label.tolist()):
        out.row([str(i), str(m), str(y)])
    _write_text(path, out.text())


def read_annotations(path) -> AnnotationSet:
    with open(path, newline="") as fh:
        meta = _read_header(fh, "annotations")
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["item_id", "annotator_id", "label"]:
        raise FormatError(f"{path}: expected columns item_id, annotator_id, label")
    try:
        arr = np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64).reshape(-1, 3)
        return AnnotationSet(arr[:, 0], arr[:, 1], arr[:, 2], int(meta["n_items"]),
                             int(meta["n_annotators"]), int(meta["K"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed annotation file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Confusions, labels, JSON
# ---------------------------------------------------------------------------


def confusions_to_dict(A, tags=None, extra=None):
    A = np.asarray(A, dtype=np.float64)
    tags = tags if tags is not None else [f"annotator({m})" for m in range(A.shape[0])]
    d = {"schema_version": SCHEMA_VERSION, "K": int(A.shape[1]),
         "matrices": [{"tag": t, "matrix": a.tolist()} for t, a in zip(tags, A)]}
    if extra:
        d.update(extra)
    return d


def write_confusions(path, ensemble_or_A, tags=None, extra=None):
    if isinstance(ensemble_or_A, ConfusionEnsemble):
        A, tags = ensemble_or_A.A, ensemble_or_A.tags
    else:
        A = ensemble_or_A
    write_json(path, confusions_to_dict(A, tags, extra))


def read_confusions(path) -> ConfusionEnsemble:
    d = read_json(path)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported confusion schema version {d.get('schema_version')!r}")
    try:
        mats = d["matrices"]
        A = np.array([m["matrix"] for m in mats], dtype=np.float64)
        tags = [m.get("tag", "") for m in mats]
        K = int(d["K"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed confusion file {path}: {exc}") from exc
    if A.ndim != 3 or A.shape[1:] != (K, K):
        raise FormatError(f"{path}: matrices must all be {K} x {K}")
    return ConfusionEnsemble(A, tags)


def write_labels(path, posterior):
    q = posterior.q
    K, N = q.shape
    out = _Lines(_header_line("labels", {"K": K, "N": N}))
    out.row(["item_id", "hard_label"] + [f"q_{k + 1}" for k in range(K)])
    hard = posterior.hard
    for n in range(N):
        out.row([str(n), str(int(hard[n]))] + [_fmt(v) for v in q[:, n]])
    _write_text(path, out.text())


def read_labels(path):
    from .baselines import PosteriorLabels

    with open(path, newline="") as fh:
        meta = _read_header(fh, "labels")
        rows = list(csv.reader(fh))[1:]
    try:
        q = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), int(meta["K"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed labels file {path}: {exc}") from exc
    return PosteriorLabels(q.T.copy())


def write_json(path, obj):
    obj = dict(obj)
    obj.setdefault("schema_version", SCHEMA_VERSION)
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return d


def write_matrix_csv(path, Z):
    """Plain numeric CSV (one row per line), used for SSC inputs."""
    out = _Lines("")
    for row in np.asarray(Z, dtype=np.float64):
        out.row([_fmt(v) for v in row])
    _write_text(path, out.text())


def read_matrix(path):
    """Matrix from a numeric CSV or a confusion JSON (stacked to W)."""
    if os.path.splitext(str(path))[1].lower() == ".json":
        ens = read_confusions(path)
        return ens.A.reshape(-1, ens.K)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    try:
        Z = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric matrix entry: {exc}") from exc
    if Z.ndim != 2 or Z.size == 0:
        raise FormatError(f"{path}: expected a non-empty rectangular matrix")
    return Z
