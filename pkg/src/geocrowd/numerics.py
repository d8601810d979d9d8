"""Dense numerical kernels shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. Nothing here keeps global
state; the only mutable object is :class:`AdamState`, which belongs to a
single training run.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack
from scipy.optimize import linear_sum_assignment

from .errors import InvalidArgumentError, NonFiniteGradientError, NumericalDomainError

__all__ = [
    "AdamState",
    "Rng",
    "adam_step",
    "as_matrix",
    "cholesky_lower",
    "col_softmax",
    "hungarian",
    "logdet_psd",
    "nnls",
]


def as_matrix(a, name="matrix"):
    """Return ``a`` as a C-contiguous 2-D float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


class Rng:
    """Seeded counter-based random stream.

    Wraps numpy's Philox bit generator so a seed fixes the stream on every
    platform. ``spawn(*keys)`` derives an independent child stream from the
    seed and the keys alone, which lets callers re-create e.g. the shuffle of
    epoch 17 without replaying epochs 0..16.
    """

    def __init__(self, seed: int, *keys: int):
        if seed < 0 or seed >= 2**64:
            raise InvalidArgumentError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    @property
    def counter(self) -> int:
        state = self.gen.bit_generator.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(state)))

    def bytes(self, n: int) -> bytes:
        return self.gen.bytes(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, keys={self.keys})"


# ---------------------------------------------------------------------------
# Softmax and log-determinant
# ---------------------------------------------------------------------------


def col_softmax(logits):
    """Softmax applied independently to every column of ``logits``.

    The column maximum is subtracted before exponentiation, so any finite
    input is safe.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("col_softmax: logits contain non-finite entries")
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def cholesky_lower(m, ridge=0.0):
    """Lower Cholesky factor of ``m + ridge*I``.

    Raises :class:`NumericalDomainError` naming the first pivot that is not
    positive.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {m.shape}")
    if ridge < 0:
        raise InvalidArgumentError(f"ridge must be >= 0, got {ridge}")
    if not np.all(np.isfinite(m)):
        raise NumericalDomainError("matrix has non-finite entries")
    a = m + ridge * np.eye(m.shape[0])
    c, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NumericalDomainError(
            f"Cholesky failed: pivot {info - 1} is not positive "
            f"(leading minor of order {info}, ridge={ridge})"
        )
    if info < 0:
        raise InvalidArgumentError(f"dpotrf rejected argument {-info}")
    return c


def logdet_psd(m, ridge=0.0):
    """``log det(m + ridge*I)`` for a symmetric positive (semi)definite ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 2 and m.shape[0] == m.shape[1]:
        if np.any(np.abs(m - m.T) > 1e-10):
            raise InvalidArgumentError("logdet_psd: matrix is not symmetric within 1e-10")
    c = cholesky_lower(m, ridge)
    return float(2.0 * np.sum(np.log(np.diag(c))))


# ---------------------------------------------------------------------------
# Nonnegative least squares
# ---------------------------------------------------------------------------


@dataclass
class NnlsResult:
    x: np.ndarray
    residual: float
    trace: list = field(default_factory=list)
    iterations: int = 0


def nnls(A, b, max_iter=None, tol=None, return_trace=False):
    """Solve ``min ||A x - b||_2`` subject to ``x >= 0``.

    Lawson--Hanson active-set method. Each outer iteration frees the
    coordinate with the largest positive dual and re-solves on the passive
    set, stepping back toward feasibility when the unconstrained solve goes
    negative; the residual norm is recorded after every outer iteration.

    Parameters
    ----------
    A : (n, k) array
    b : (n,) array
    max_iter : int, optional
        Outer iteration cap, default ``10 * k``.
    tol : float, optional
        Dual feasibility tolerance, default scaled to ``A``.
    return_trace : bool
        Return an :class:`NnlsResult` with the residual trace instead of the
        ``(x, residual)`` pair.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).ravel()
    if A.ndim == 1:
        A = A[:, None]
    n, k = A.shape
    if n < 1 or k < 1:
        raise InvalidArgumentError(f"nnls needs a non-empty system, got shape {A.shape}")
    if b.shape[0] != n:
        raise InvalidArgumentError(f"shape mismatch: A is {A.shape}, b has {b.shape[0]} rows")
    if max_iter is None:
        max_iter = 10 * k
    if tol is None:
        tol = 10.0 * max(n, k) * np.finfo(float).eps * max(np.abs(A).max(), 1.0) * max(
            np.abs(b).max(), 1.0
        )

    x = np.zeros(k)
    passive = np.zeros(k, dtype=bool)
    r = b.copy()
    trace = [float(np.linalg.norm(r))]
    w = A.T @ r
    it = 0
    while it < max_iter and (~passive).any() and np.max(np.where(passive, -np.inf, w)) > tol:
        it += 1
        j = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[j] = True
        s = np.zeros(k)
        idx = np.flatnonzero(passive)
        s[idx] = np.linalg.lstsq(A[:, idx], b, rcond=None)[0]
        inner = 0
        while passive.any() and s[passive].min() <= 0 and inner < 3 * k:
            inner += 1
            bad = passive & (s <= 0)
            alpha = np.min(x[bad] / (x[bad] - s[bad]))
            x = x + alpha * (s - x)
            passive &= x > tol
            x[~passive] = 0.0
            s = np.zeros(k)
            idx = np.flatnonzero(passive)
            if idx.size:
                s[idx] = np.linalg.lstsq(A[:, idx], b, rcond=None)[0]
        x = s
        r = b - A @ x
        res = float(np.linalg.norm(r))
        if res > trace[-1]:
            # Round-off on a degenerate step; keep the better iterate.
            break
        trace.append(res)
        w = A.T @ r
    x = np.maximum(x, 0.0)
    residual = float(np.linalg.norm(b - A @ x))
    if return_trace:
        return NnlsResult(x=x, residual=residual, trace=trace, iterations=it)
    return x, residual


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------


def hungarian(cost):
    """Permutation ``pi`` minimising ``sum_j cost[j, pi[j]]``.

    Returns an integer array; row ``j`` is assigned column ``pi[j]``.
    """
    cost = as_matrix(cost, "cost")
    if cost.shape[0] != cost.shape[1]:
        raise InvalidArgumentError(f"cost must be square, got {cost.shape}")
    rows, cols = linear_sum_assignment(cost)
    pi = np.empty(cost.shape[0], dtype=np.int64)
    pi[rows] = cols
    return pi


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            **kw,
        )


def adam_step(params, grads, state: AdamState, mask=None):
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``mask`` optionally lists which parameter tensors are updated; skipped
    tensors keep their moments untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidArgumentError("params, grads and optimizer state differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape or state.m[i].shape != params[i].shape:
            raise InvalidArgumentError(f"shape mismatch for parameter tensor {i}")
        bad = ~np.isfinite(g)
        if bad.any():
            flat = int(np.flatnonzero(bad.ravel())[0])
            raise NonFiniteGradientError((i, flat), float(g.ravel()[flat]))
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if mask is not None and not mask[i]:
            continue
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
