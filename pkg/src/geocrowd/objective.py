"""Loss terms and their analytic gradients.

Data terms act on per-annotation predicted distributions ``P`` (T x K, one
row per observed (annotator, item) pair). Regularisers act on the batch of
classifier outputs ``F`` (K x B) or on the confusion stack ``A`` (M x K x K).
Every function returns ``(value, gradient)``; gradients with respect to
``A`` are chained into the confusion logits by :func:`geocrowd.model.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .errors import InvalidArgumentError
from .numerics import cholesky_lower

PROB_FLOOR = 1e-12
DEFAULT_RIDGE = 1e-8
REGULARIZER_KINDS = ("none", "logdet_F", "logdet_W", "trace")


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    lam: float = 0.0
    ridge: float = DEFAULT_RIDGE

    def __post_init__(self):
        if self.kind not in REGULARIZER_KINDS:
            raise InvalidArgumentError(
                f"unknown regularizer {self.kind!r}; expected one of {REGULARIZER_KINDS}"
            )
        if self.lam < 0 or self.ridge < 0:
            raise InvalidArgumentError("lambda and ridge must be >= 0")

    @property
    def active(self):
        return self.kind != "none" and self.lam > 0


@dataclass
class LossBreakdown:
    data: float
    reg: float
    n_terms: int

    @property
    def total(self):
        return self.data + self.reg


def _check_labels(labels, K):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InvalidArgumentError(f"label out of range [0, {K})")
    return labels


def ccem_data_loss(P, labels, floor=PROB_FLOOR):
    """Mean negative log-probability of the observed labels.

    ``P[t]`` is the predicted label distribution of term ``t``; probabilities
    are floored at ``floor`` before the logarithm.
    """
    P = np.asarray(P, dtype=np.float64)
    labels = _check_labels(labels, P.shape[1])
    T = labels.size
    grad = np.zeros_like(P)
    if T == 0:
        return 0.0, grad
    rows = np.arange(T)
    p = np.maximum(P[rows, labels], floor)
    grad[rows, labels] = -1.0 / (T * p)
    return float(-np.mean(np.log(p))), grad


def crowdlayer_loss(Q, labels):
    """Cross-entropy after an extra softmax on each product ``A_m f(x)``."""
    Q = np.asarray(Q, dtype=np.float64)
    labels = _check_labels(labels, Q.shape[1])
    T = labels.size
    if T == 0:
        return 0.0, np.zeros_like(Q)
    z = Q - Q.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(T)
    loss = float(np.mean(logsum - z[rows, labels]))
    soft = np.exp(z - logsum[:, None])
    soft[rows, labels] -= 1.0
    return loss, soft / T


def oracle_kl_loss(P_true, P, floor=PROB_FLOOR):
    """Mean ``KL(p_true || p)`` over the given terms.

    Stands in for the data term when the exact annotation distributions are
    known (the infinite-sample limit of the cross-entropy).
    """
    P_true = np.asarray(P_true, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if P_true.shape != P.shape:
        raise InvalidArgumentError("P_true and P shapes differ")
    T = P.shape[0]
    if T == 0:
        return 0.0, np.zeros_like(P)
    q = np.maximum(P, floor)
    pos = P_true > 0
    plogp = np.where(pos, P_true * np.log(np.where(pos, P_true, 1.0)), 0.0)
    kl = np.sum(plogp - P_true * np.log(q)) / T
    return float(max(kl, 0.0)), -P_true / (T * q)


def reg_logdet_F(F, lam, ridge=DEFAULT_RIDGE):
    """``-lam * logdet(F F^T + ridge I)`` and its gradient in ``F``."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] < 1:
        raise InvalidArgumentError("F must be K x B with B >= 1")
    if lam == 0:
        return 0.0, np.zeros_like(F)
    L = cholesky_lower(F @ F.T, ridge)
    value = -lam * 2.0 * float(np.sum(np.log(np.diag(L))))
    return value, -2.0 * lam * cho_solve((L, True), F)


def stack_confusions(A):
    """``W = [A_1; ...; A_M]`` as an (M*K) x K matrix."""
    A = np.asarray(A, dtype=np.float64)
    return A.reshape(-1, A.shape[-1])


def reg_logdet_W(A, lam, ridge=DEFAULT_RIDGE):
    """``-lam * logdet(W^T W + ridge I)`` and its gradient in the stack ``A``."""
    A = np.asarray(A, dtype=np.float64)
    if lam == 0:
        return 0.0, np.zeros_like(A)
    W = stack_confusions(A)
    L = cholesky_lower(W.T @ W, ridge)
    value = -lam * 2.0 * float(np.sum(np.log(np.diag(L))))
    # W G^{-1} = (G^{-1} W^T)^T since G is symmetric
    dW = -2.0 * lam * cho_solve((L, True), W.T).T
    return value, dW.reshape(A.shape)


def reg_trace(A, lam):
    """``lam * sum_m trace(A_m)``; the gradient is ``lam * I`` per block."""
    A = np.asarray(A, dtype=np.float64)
    K = A.shape[-1]
    value = lam * float(np.trace(A, axis1=-2, axis2=-1).sum())
    grad = np.broadcast_to(lam * np.eye(K), A.shape).copy()
    return value, grad


def regularizer(spec: RegularizerSpec, F, A):
    """Evaluate ``spec`` on a batch; returns ``(value, dF or None, dA or None)``."""
    if not spec.active:
        return 0.0, None, None
    if spec.kind == "logdet_F":
        v, g = reg_logdet_F(F, spec.lam, spec.ridge)
        return v, g, None
    if spec.kind == "logdet_W":
        v, g = reg_logdet_W(A, spec.lam, spec.ridge)
        return v, None, g
    v, g = reg_trace(A, spec.lam)
    return v, None, g
