"""Classifier network and per-annotator confusion layers.

The classifier maps a feature matrix ``X`` (D x B, one column per item) to
class probabilities ``F`` (K x B) through ReLU hidden layers and a softmax
head. Annotator ``m`` owns unconstrained logits ``B[m]`` and its confusion
matrix is ``A[m] = col_softmax(B[m])``, so every ``A[m]`` is column
stochastic at all times. Entry ``A[m][k, j]`` is the probability that the
annotator answers ``k`` when the true class is ``j``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CheckpointError, InvalidArgumentError, StaleCacheError
from .numerics import Rng, col_softmax

CHECKPOINT_MAGIC = b"GEOCROWD-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class ClassifierParams:
    """Weights ``W[i]`` (d_i x d_{i-1}) and biases ``b[i]`` (d_i,)."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgumentError("need one bias per weight matrix and >= 1 layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidArgumentError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgumentError(f"layer {i} input width does not chain")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def hidden(self):
        return [w.shape[0] for w in self.weights[:-1]]

    def copy(self):
        return ClassifierParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation
        )


@dataclass
class ForwardCache:
    X: np.ndarray
    pre: list  # pre-activations z_i, one per layer
    post: list  # inputs to each layer (h_0 = X, h_i = relu(z_i))
    F: np.ndarray
    version: int
    item: np.ndarray | None = None
    annot: np.ndarray | None = None
    P: np.ndarray | None = None


@dataclass
class Gradients:
    weights: list
    biases: list
    B: np.ndarray

    def as_list(self):
        return [*self.weights, *self.biases, self.B]

    def global_norm(self):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.as_list())))

    def scale(self, s):
        for g in self.as_list():
            g *= s


@dataclass
class CrowdModel:
    """Classifier plus confusion logits for ``M`` annotators.

    ``frozen`` models use exact identity confusions and never train ``B``;
    this is how classifiers are fit directly on integrated labels.
    """

    classifier: ClassifierParams
    B: np.ndarray  # (M, K, K) confusion logits
    mu_init: float = 4.0
    seed: int = 0
    frozen: bool = False
    A: np.ndarray = field(init=False, repr=False)
    version: int = field(default=0, init=False)

    def __post_init__(self):
        self.B = np.ascontiguousarray(self.B, dtype=np.float64)
        if self.B.ndim != 3 or self.B.shape[1] != self.B.shape[2]:
            raise InvalidArgumentError(f"B must be (M, K, K), got {self.B.shape}")
        if self.B.shape[0] < 1 or self.K < 2:
            raise InvalidArgumentError("need M >= 1 and K >= 2")
        if self.classifier.out_dim != self.K:
            raise InvalidArgumentError("classifier output width must equal K")
        self.refresh()

    @property
    def K(self):
        return self.B.shape[1]

    @property
    def M(self):
        return self.B.shape[0]

    @property
    def D(self):
        return self.classifier.in_dim

    def refresh(self):
        """Recompute ``A`` from ``B`` and invalidate outstanding caches."""
        if self.frozen:
            self.A = np.broadcast_to(np.eye(self.K), self.B.shape).copy()
        else:
            self.A = np.stack([col_softmax(b) for b in self.B])
        self.version += 1

    def parameters(self):
        """Trainable tensors in a fixed order: weights, biases, then ``B``."""
        return [*self.classifier.weights, *self.classifier.biases, self.B]

    def copy(self):
        return CrowdModel(self.classifier.copy(), self.B.copy(), self.mu_init, self.seed, self.frozen)


def init_model(D, K, M, hidden=(), mu_init=4.0, rng=None, frozen=False):
    """He-initialised classifier and ``B[m] = mu_init * I``.

    ``mu_init = 0`` gives uniform confusions; the default 4 gives a
    near-identity start with diagonal ``e^4 / (e^4 + K - 1)``.
    """
    if mu_init < 0:
        raise InvalidArgumentError(f"mu_init must be >= 0, got {mu_init}")
    if rng is None:
        rng = Rng(0)
    elif isinstance(rng, int):
        rng = Rng(rng)
    dims = [int(D), *[int(h) for h in hidden], int(K)]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.gen.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    B = np.broadcast_to(mu_init * np.eye(K), (M, K, K)).copy()
    return CrowdModel(ClassifierParams(weights, biases), B, float(mu_init), rng.seed, frozen)


def gtp_forward(params: ClassifierParams, X, version=0):
    """Class probabilities for every column of ``X``.

    Returns ``(F, cache)`` where ``F`` is K x B with columns on the simplex.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != params.in_dim:
        raise InvalidArgumentError(
            f"X must be {params.in_dim} x B, got shape {X.shape}"
        )
    h = X
    pre, post = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        post.append(h)
        z = w @ h + b[:, None]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    F = col_softmax(h) if h.shape[1] else np.zeros_like(h)
    return F, ForwardCache(X=X, pre=pre, post=post, F=F, version=version)


def crowd_forward(model: CrowdModel, X, item, annot):
    """Predicted annotation distributions ``p_t = A[annot[t]] f(x_{item[t]})``.

    ``item`` indexes columns of ``X``. Returns ``(P, cache)`` with ``P`` of
    shape (T, K).
    """
    item = np.asarray(item, dtype=np.int64)
    annot = np.asarray(annot, dtype=np.int64)
    if item.shape != annot.shape:
        raise InvalidArgumentError("item and annot index arrays differ in length")
    if annot.size and (annot.min() < 0 or annot.max() >= model.M):
        raise InvalidArgumentError(f"annotator index out of range [0, {model.M})")
    F, cache = gtp_forward(model.classifier, X, model.version)
    if item.size and (item.min() < 0 or item.max() >= F.shape[1]):
        raise InvalidArgumentError("item index out of range for this batch")
    P = kernels.gather_products(model.A, F, item, annot) if item.size else np.zeros((0, model.K))
    cache.item, cache.annot, cache.P = item, annot, P
    return P, cache


def confusion_logit_grad(A, dA):
    """Chain ``dL/dA`` through the column softmax to ``dL/dB``."""
    return A * (dA - np.sum(A * dA, axis=-2, keepdims=True))


def backward(model: CrowdModel, cache: ForwardCache, grad_P=None, grad_F=None, grad_A=None):
    """Exact gradients of a scalar loss with respect to every parameter.

    ``grad_P`` is the upstream gradient on the per-term products from
    :func:`crowd_forward`; ``grad_F`` and ``grad_A`` add direct dependence
    on the classifier outputs and the confusion matrices (regularisers).
    """
    if cache.version != model.version:
        raise StaleCacheError(
            f"forward cache is from model version {cache.version}, model is at {model.version}"
        )
    F = cache.F
    dF = np.zeros_like(F) if grad_F is None else np.array(grad_F, dtype=np.float64)
    dA = np.zeros_like(model.A) if grad_A is None else np.array(grad_A, dtype=np.float64)
    if grad_P is not None and cache.item is not None and cache.item.size:
        gA, gF = kernels.scatter_grads(model.A, F, cache.item, cache.annot, grad_P)
        dA += gA
        dF += gF
    dB = np.zeros_like(model.B) if model.frozen else confusion_logit_grad(model.A, dA)

    params = model.classifier
    n_layers = len(params.weights)
    dW = [None] * n_layers
    db = [None] * n_layers
    # softmax head, column-wise Jacobian-vector product
    dz = F * (dF - np.sum(F * dF, axis=0, keepdims=True))
    for i in range(n_layers - 1, -1, -1):
        dW[i] = dz @ cache.post[i].T
        db[i] = dz.sum(axis=1)
        if i:
            dh = params.weights[i].T @ dz
            dz = dh * (cache.pre[i - 1] > 0)
    return Gradients(dW, db, dB)


def predict_proba(model: CrowdModel, X, batch=4096):
    X = np.asarray(X, dtype=np.float64)
    outs = [
        gtp_forward(model.classifier, X[:, s : s + batch])[0]
        for s in range(0, X.shape[1], batch)
    ]
    return np.concatenate(outs, axis=1) if outs else np.zeros((model.K, 0))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: CrowdModel, path, train_state=None):
    """Write ``model`` (and optional resumable training state) to ``path``.

    Layout: magic line, little-endian uint32 format version, then an ``npz``
    archive holding every array plus a JSON metadata blob.
    """
    meta = {
        "D": model.D,
        "K": model.K,
        "M": model.M,
        "hidden": model.classifier.hidden,
        "activation": model.classifier.activation,
        "mu_init": model.mu_init,
        "seed": model.seed,
        "frozen": model.frozen,
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(model.classifier.weights, model.classifier.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    arrays["B"] = model.B
    if train_state is not None:
        state = dict(train_state)
        for i, (m, v) in enumerate(zip(state.pop("adam_m", []), state.pop("adam_v", []))):
            arrays[f"adam_m{i}"] = m
            arrays[f"adam_v{i}"] = v
        for i, a in enumerate(state.pop("live_params", None) or []):
            arrays[f"live{i}"] = a
        meta["train_state"] = state
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(buf.getvalue())


def load_checkpoint(path, with_state=False):
    """Inverse of :func:`save_checkpoint`.

    Returns the model, or ``(model, train_state)`` when ``with_state``.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a geocrowd checkpoint (bad magic bytes)")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 4:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", raw[off : off + 4])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )
    try:
        with np.load(io.BytesIO(raw[off + 4 :]), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode())
        n_layers = len(meta["hidden"]) + 1
        clf = ClassifierParams(
            [arrays[f"W{i}"].astype(np.float64) for i in range(n_layers)],
            [arrays[f"b{i}"].astype(np.float64) for i in range(n_layers)],
            meta["activation"],
        )
        model = CrowdModel(clf, arrays["B"], meta["mu_init"], meta["seed"], meta["frozen"])
    except CheckpointError:
        raise
    except Exception as exc:  # zip/json/key errors all mean corruption
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if not with_state:
        return model
    state = meta.get("train_state")
    if state is not None:
        n = len(model.parameters())
        state["adam_m"] = [arrays[f"adam_m{i}"] for i in range(n)]
        state["adam_v"] = [arrays[f"adam_v{i}"] for i in range(n)]
        if "live0" in arrays:
            state["live_params"] = [arrays[f"live{i}"] for i in range(n)]
    return model, state
