"""Two-stage references: majority voting and Dawid--Skene EM.

Both produce posterior class responsibilities per item; a classifier can
then be trained on the hard labels (see :func:`integrated_annotations`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import InvalidArgumentError
from .simulator import AnnotationSet

DS_SMOOTHING = 0.01


@dataclass
class PosteriorLabels:
    """Responsibilities ``q`` (K x N); columns lie on the simplex."""

    q: np.ndarray

    @property
    def hard(self):
        # argmax returns the first maximum, i.e. the smallest class index
        return np.argmax(self.q, axis=0)


def majority_vote(annotations: AnnotationSet, K=None):
    """Vote shares per item; unannotated items get the uniform distribution."""
    K = annotations.K if K is None else K
    counts = annotations.counts()
    tot = counts.sum(axis=1, keepdims=True)
    q = np.where(tot > 0, counts / np.maximum(tot, 1.0), 1.0 / K)
    return PosteriorLabels(q.T)


@dataclass
class DawidSkeneResult:
    confusions: np.ndarray  # (M, K, K), column k' = Pr(label | true k')
    posterior: PosteriorLabels
    priors: np.ndarray
    log_likelihood: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _m_step(q, ann, M, K, s):
    counts = kernels.ds_counts(q, ann.item, ann.annot, ann.label, M)  # (M, K_label, K_true)
    A = (counts + s) / (counts.sum(axis=1, keepdims=True) + s * K)
    priors = q.mean(axis=0)
    return A, priors


def dawid_skene_em(annotations: AnnotationSet, K=None, M=None, max_iter=100, tol=1e-6,
                   smoothing=DS_SMOOTHING):
    """Dawid--Skene confusion estimates by expectation--maximisation.

    Starts from majority-vote responsibilities. The M-step uses additive
    smoothing ``smoothing`` in every confusion cell, i.e. a symmetric
    Dirichlet prior, so the quantity EM never decreases is the
    log-likelihood plus ``smoothing * sum log A``; both are recorded.
    Stops when no responsibility moves by more than ``tol``.
    """
    if len(annotations) == 0:
        raise InvalidArgumentError("Dawid-Skene needs at least one annotation")
    K = annotations.K if K is None else K
    M = annotations.n_annotators if M is None else M
    N = annotations.n_items
    q = majority_vote(annotations, K).q.T.copy()  # N x K
    lls, objs = [], []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        A, priors = _m_step(q, annotations, M, K, smoothing)
        logA = np.log(A)
        with np.errstate(divide="ignore"):
            log_prior = np.log(priors)
        joint = kernels.ds_log_posterior(logA, annotations.item, annotations.annot,
                                         annotations.label, log_prior, N)
        norm = logsumexp(joint, axis=1, keepdims=True)
        q_new = np.exp(joint - norm)
        ll = float(norm.sum())
        lls.append(ll)
        objs.append(ll + smoothing * float(logA.sum()))
        delta = float(np.max(np.abs(q_new - q)))
        q = q_new
        if delta < tol:
            converged = True
            break
    A, priors = _m_step(q, annotations, M, K, smoothing)
    return DawidSkeneResult(A, PosteriorLabels(q.T), priors, lls, objs, it, converged)


def integrated_annotations(posterior: PosteriorLabels, items):
    """Single-annotator annotation set carrying the hard labels of ``items``."""
    items = np.asarray(items, dtype=np.int64)
    K, N = posterior.q.shape
    labels = posterior.hard[items]
    return AnnotationSet(items, np.zeros_like(items), labels, N, 1, K)
