"""Identifiability diagnostics: permutation alignment, SSC membership, metrics.

Estimates are only defined up to one class permutation shared by every
confusion matrix and the classifier. ``pi[j] = k`` means estimated class
``j`` corresponds to true class ``k``; with ``Pi`` the matrix whose column
``j`` is ``e_{pi[j]}``, the aligned target for ``A_hat_m`` is ``A_true_m Pi``
and for ``f_hat`` it is ``Pi^T f_true``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .model import CrowdModel, predict_proba
from .numerics import Rng, hungarian, nnls
from .objective import PROB_FLOOR

DEFAULT_SSC_SAMPLES = 1000
DEFAULT_SSC_TOL = 1e-6


@dataclass
class AlignmentResult:
    pi: np.ndarray
    confusion_errors: np.ndarray  # squared Frobenius error per annotator
    predictor_error: float | None = None
    objective: float = 0.0

    @property
    def matrix(self):
        return permutation_matrix(self.pi)


def permutation_matrix(pi):
    K = len(pi)
    P = np.zeros((K, K))
    P[np.asarray(pi), np.arange(K)] = 1.0
    return P


def confusion_cost(A_hat, A_true):
    """``cost[j, k] = sum_m ||A_hat_m[:, j] - A_true_m[:, k]||^2``."""
    A_hat = np.asarray(A_hat, dtype=np.float64)
    A_true = np.asarray(A_true, dtype=np.float64)
    if A_hat.shape != A_true.shape or A_hat.ndim != 3:
        raise InvalidArgumentError(
            f"confusion stacks must share shape (M, K, K): {A_hat.shape} vs {A_true.shape}"
        )
    diff = A_hat[:, :, :, None] - A_true[:, :, None, :]
    return np.sum(diff**2, axis=(0, 1))


def predictor_cost(F_hat, F_true):
    """``cost[j, k] = sum_n (F_hat[j, n] - F_true[k, n])^2``."""
    diff = F_hat[:, None, :] - F_true[None, :, :]
    return np.sum(diff**2, axis=2)


def align_permutation(A_hat, A_true, F_hat=None, F_true=None):
    """Single class permutation that best matches estimated to true confusions.

    When ``A_hat``/``A_true`` are ``None`` the permutation is fitted on the
    classifier outputs instead. The predictor error
    ``mean_n ||f_hat(x_n) - Pi^T f_true(x_n)||^2`` is reported when both
    ``F`` matrices are given.
    """
    if A_hat is not None:
        cost = confusion_cost(A_hat, A_true)
    elif F_hat is not None and F_true is not None:
        cost = predictor_cost(np.asarray(F_hat), np.asarray(F_true))
    else:
        raise InvalidArgumentError("need confusions or classifier outputs to align")
    pi = hungarian(cost)
    K = len(pi)
    obj = float(cost[np.arange(K), pi].sum())
    errors = np.array([])
    if A_hat is not None:
        A_hat = np.asarray(A_hat, dtype=np.float64)
        aligned = np.asarray(A_true, dtype=np.float64)[:, :, pi]
        errors = np.sum((A_hat - aligned) ** 2, axis=(1, 2))
    pred = None
    if F_hat is not None and F_true is not None:
        F_hat = np.asarray(F_hat)
        F_true = np.asarray(F_true)
        pred = float(np.mean(np.sum((F_hat - F_true[pi]) ** 2, axis=0)))
    return AlignmentResult(pi, errors, pred, obj)


def brute_force_alignment(cost):
    """Exhaustive minimum over all permutations (oracle for small K)."""
    cost = np.asarray(cost)
    K = cost.shape[0]
    best, best_pi = np.inf, None
    for perm in itertools.permutations(range(K)):
        v = cost[np.arange(K), perm].sum()
        if v < best:
            best, best_pi = v, np.array(perm)
    return best_pi, float(best)


# ---------------------------------------------------------------------------
# Sufficiently scattered condition
# ---------------------------------------------------------------------------


@dataclass
class SscVerdict:
    samples: int
    failures: int
    max_residual: float
    tol: float
    verdict: str = field(init=False)
    scope: str = "condition (i) only"

    def __post_init__(self):
        self.verdict = "fail" if self.failures > 0 else "pass"

    @property
    def passed(self):
        return self.verdict == "pass"

    def to_dict(self):
        return {
            "schema_version": 1,
            "verdict": self.verdict,
            "samples": self.samples,
            "failures": self.failures,
            "max_residual": self.max_residual,
            "tol": self.tol,
            "scope": self.scope,
        }


def cone_boundary_samples(K, n, rng):
    """Unit vectors on the boundary of ``{x : sqrt(K-1) ||x|| <= 1^T x}``."""
    ones = np.ones(K) / np.sqrt(K)
    v = rng.gen.standard_normal((n, K))
    v -= np.outer(v @ ones, ones)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.sqrt((K - 1) / K) * ones[None, :] + v / np.sqrt(K)


def ssc_check(Z, samples=DEFAULT_SSC_SAMPLES, tol=DEFAULT_SSC_TOL, seed=0):
    """Monte-Carlo test that the cone of ``Z``'s rows contains the cone above.

    Draws ``samples`` boundary directions of the second-order cone and
    checks each lies in ``cone(Z^T)`` via nonnegative least squares. Any
    failure proves condition (i) is violated; passing is evidence only, and
    condition (ii) is not examined.

    ``tol`` bounds the NNLS objective, the residual sum of squares
    ``min_c ||Zn^T c - x||^2`` for a unit direction ``x`` and unit rows
    ``Zn``; ``max_residual`` reports the same quantity. Rows drawn from a
    continuous distribution never reach the cone's tangent points exactly,
    so the tolerance is what separates "covers the cone up to rounding"
    from a real gap.

    The target cone is symmetric under coordinate permutations, so the
    columns of ``Z`` are put in a canonical (lexicographic) order first; a
    column-permuted ``Z`` then meets the same samples and gets the same
    verdict.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise InvalidArgumentError("Z must be L x K")
    if np.any(Z < -1e-12):
        raise InvalidArgumentError("Z has negative entries")
    if samples < 1:
        raise InvalidArgumentError("need at least one sample")
    Z = np.maximum(Z, 0.0)
    Z = Z[:, np.lexsort(Z[::-1])]
    # drop duplicate and zero rows; they never change the cone
    norms = np.linalg.norm(Z, axis=1)
    Zn = np.unique(np.round(Z[norms > 0] / norms[norms > 0, None], 14), axis=0)
    K = Z.shape[1]
    xs = cone_boundary_samples(K, samples, Rng(seed))
    failures = 0
    worst = 0.0
    for x in xs:
        _, rnorm = nnls(Zn.T, x)
        res = rnorm * rnorm
        worst = max(worst, res)
        if res > tol:
            failures += 1
    return SscVerdict(samples, failures, float(worst), tol)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(model: CrowdModel | None, dataset, items=None, true_confusions=None,
             annotations=None, estimated_confusions=None, F_hat=None):
    """Flat metrics dictionary for a fitted model on ``items`` (test split).

    Metrics that need missing ground truth are omitted.
    """
    items = dataset.indices("test") if items is None else np.asarray(items, dtype=np.int64)
    if items.size == 0:
        raise InvalidArgumentError("evaluation split is empty")
    out = {"n_eval": int(items.size)}
    y = dataset.y[items]
    if F_hat is None and model is not None:
        F_hat = predict_proba(model, dataset.X[:, items])
    F_true = dataset.F_true[:, items] if dataset.F_true is not None else None
    A_hat = estimated_confusions
    if A_hat is None and model is not None and not model.frozen:
        A_hat = model.A
    if F_hat is not None:
        out["raw_accuracy"] = float(np.mean(np.argmax(F_hat, axis=0) == y))
    align = None
    if A_hat is not None and true_confusions is not None and np.shape(A_hat) == np.shape(true_confusions):
        align = align_permutation(A_hat, true_confusions, F_hat, F_true)
        M, K = align.confusion_errors.size, A_hat.shape[1]
        out["confusion_mse"] = float(align.confusion_errors.sum() / (M * K * K))
    elif F_hat is not None and F_true is not None:
        align = align_permutation(None, None, F_hat, F_true)
    if align is not None:
        out["permutation"] = [int(v) for v in align.pi]
        if F_hat is not None:
            out["aligned_accuracy"] = float(np.mean(align.pi[np.argmax(F_hat, axis=0)] == y))
        if align.predictor_error is not None:
            out["predictor_error"] = align.predictor_error
    if (annotations is not None and model is not None and true_confusions is not None
            and dataset.F_true is not None and len(annotations)):
        out["kl_observed"] = observed_kl(model, dataset, annotations, true_confusions)
    return out


def observed_kl(model, dataset, annotations, true_confusions):
    """Mean ``KL(A_true_m f_true(x_n) || A_hat_m f_hat(x_n))`` over observed pairs."""
    from . import kernels

    F_hat = predict_proba(model, dataset.X)
    P_hat = kernels.gather_products(model.A, F_hat, annotations.item, annotations.annot)
    P_true = kernels.gather_products(
        np.asarray(true_confusions, dtype=np.float64), dataset.F_true,
        annotations.item, annotations.annot,
    )
    q = np.maximum(P_hat, PROB_FLOOR)
    pos = P_true > 0
    terms = np.where(pos, P_true * (np.log(np.where(pos, P_true, 1.0)) - np.log(q)), 0.0)
    return float(terms.sum() / len(annotations))
