"""Synthetic crowdsourcing worlds.

A world is a Gaussian-mixture dataset whose Bayes posterior is known in
closed form, a set of ground-truth confusion matrices, and a sparse set of
sampled annotations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import InvalidArgumentError
from .numerics import Rng

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Features ``X`` (D x N), labels ``y`` (N,), optional posteriors ``F_true`` (K x N).

    ``split`` holds an integer tag per item indexing :data:`SPLITS`.
    """

    X: np.ndarray
    y: np.ndarray
    K: int
    F_true: np.ndarray | None = None
    split: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.split is None:
            self.split = np.zeros(self.N, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int64)
        if self.y.shape != (self.N,) or self.split.shape != (self.N,):
            raise InvalidArgumentError("labels and split tags must have one entry per item")
        if self.F_true is not None and self.F_true.shape != (self.K, self.N):
            raise InvalidArgumentError("F_true must be K x N")

    @property
    def D(self):
        return self.X.shape[0]

    @property
    def N(self):
        return self.X.shape[1]

    def indices(self, split):
        return np.flatnonzero(self.split == SPLITS.index(split))


@dataclass
class ConfusionEnsemble:
    """Ground-truth confusions ``A`` (M x K x K) with a provenance tag each."""

    A: np.ndarray
    tags: list

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        if len(self.tags) != self.A.shape[0]:
            raise InvalidArgumentError("one provenance tag per annotator required")

    @property
    def M(self):
        return self.A.shape[0]

    @property
    def K(self):
        return self.A.shape[1]


@dataclass
class AnnotationSet:
    """Observed ``(item, annotator, label)`` triples, sorted by item then annotator."""

    item: np.ndarray
    annot: np.ndarray
    label: np.ndarray
    n_items: int
    n_annotators: int
    K: int

    def __post_init__(self):
        self.item = np.asarray(self.item, dtype=np.int64)
        self.annot = np.asarray(self.annot, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        if not (self.item.shape == self.annot.shape == self.label.shape):
            raise InvalidArgumentError("item, annotator and label arrays differ in length")
        for name, arr, hi in (
            ("item", self.item, self.n_items),
            ("annotator", self.annot, self.n_annotators),
            ("label", self.label, self.K),
        ):
            if arr.size and (arr.min() < 0 or arr.max() >= hi):
                raise InvalidArgumentError(f"{name} index out of range [0, {hi})")
        order = np.lexsort((self.annot, self.item))
        self.item, self.annot, self.label = self.item[order], self.annot[order], self.label[order]
        key = self.item * self.n_annotators + self.annot
        if key.size > 1 and np.any(key[1:] == key[:-1]):
            raise InvalidArgumentError("duplicate (annotator, item) pair")
        self.offsets = np.searchsorted(self.item, np.arange(self.n_items + 1))

    def __len__(self):
        return self.item.size

    def terms_for(self, items):
        """Term indices belonging to ``items``, in the order the items are given."""
        items = np.asarray(items, dtype=np.int64)
        starts, ends = self.offsets[items], self.offsets[items + 1]
        lens = ends - starts
        if lens.sum() == 0:
            return np.zeros(0, dtype=np.int64)
        base = np.repeat(starts - np.concatenate(([0], np.cumsum(lens)[:-1])), lens)
        return base + np.arange(lens.sum())

    def subset(self, keep):
        keep = np.asarray(keep)
        return AnnotationSet(
            self.item[keep], self.annot[keep], self.label[keep],
            self.n_items, self.n_annotators, self.K,
        )

    def counts(self):
        """Vote counts, an (N x K) matrix."""
        c = np.zeros((self.n_items, self.K))
        np.add.at(c, (self.item, self.label), 1.0)
        return c


# ---------------------------------------------------------------------------
# Mixture data
# ---------------------------------------------------------------------------


def _mean_directions(K, D, rng):
    """Unit vectors that are well spread for any (K, D)."""
    if D == 1:
        return (np.arange(K) - (K - 1) / 2.0)[:, None] / max((K - 1) / 2.0, 1.0)
    if D == 2:
        theta = 2 * np.pi * np.arange(K) / K + rng.gen.uniform(0, 2 * np.pi)
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if D >= K:
        q, _ = np.linalg.qr(rng.gen.standard_normal((D, K)))
        return q.T
    best, best_gap = None, -1.0
    for _ in range(64):
        u = rng.gen.standard_normal((K, D))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        d = np.linalg.norm(u[:, None] - u[None], axis=-1) + 3.0 * np.eye(K)
        if d.min() > best_gap:
            best, best_gap = u, d.min()
    return best


def mixture_posterior(X, means, weights, cov_scale=1.0):
    """Bayes posterior of a spherical Gaussian mixture, K x N."""
    sq = ((X.T[:, None, :] - means[None, :, :]) ** 2).sum(-1)  # N x K
    logits = np.log(weights)[None, :] - 0.5 * sq / cov_scale
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True)).T


def gen_mixture_dataset(K, D, N, separation=3.0, weights=None, seed=0, n_val=0, n_test=0,
                        cov_scale=1.0):
    """Sample a K-class spherical Gaussian mixture.

    Component means are ``separation`` times spread-out unit directions. The
    first ``N`` items are tagged train, followed by ``n_val`` validation and
    ``n_test`` test items. Labels are drawn from the exact posterior
    ``F_true``, which is stored with the dataset.
    """
    if K < 2 or D < 1 or N < K:
        raise InvalidArgumentError("need K >= 2, D >= 1 and N >= K")
    if not cov_scale > 0:
        raise InvalidArgumentError(f"degenerate covariance scale {cov_scale}")
    weights = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (K,) or np.any(weights <= 0):
        raise InvalidArgumentError("mixture weights must be K positive numbers")
    weights = weights / weights.sum()
    rng = Rng(seed)
    means = separation * _mean_directions(K, D, rng.spawn(0))
    total = N + n_val + n_test
    g = rng.spawn(1).gen
    comp = g.choice(K, size=total, p=weights)
    X = (means[comp] + np.sqrt(cov_scale) * g.standard_normal((total, D))).T
    F = mixture_posterior(X, means, weights, cov_scale)
    y = _categorical(F.T, rng.spawn(2))
    split = np.concatenate([np.zeros(N), np.ones(n_val), np.full(n_test, 2)]).astype(np.int64)
    meta = {
        "generator": "mixture",
        "K": K, "D": D, "N": N, "n_val": n_val, "n_test": n_test,
        "separation": float(separation), "weights": weights.tolist(),
        "cov_scale": float(cov_scale), "seed": int(seed), "means": means.tolist(),
    }
    return Dataset(X, y, K, F, split, meta)


def _categorical(probs, rng):
    """One draw per row of ``probs`` (rows on the simplex)."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.gen.random(probs.shape[0]) * cdf[:, -1]
    out = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(out, probs.shape[1] - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# Confusion ensembles
# ---------------------------------------------------------------------------


def hammer_matrix(K, gamma, rng):
    """``I + gamma * U(0,1)^{KxK}`` with columns rescaled to sum to one."""
    A = np.eye(K) + gamma * rng.gen.random((K, K))
    return A / A.sum(axis=0, keepdims=True)


def dirichlet_matrix(K, alpha, boost, rng):
    """Columns ``Dir(alpha)`` plus ``boost`` on the diagonal, renormalised."""
    A = rng.gen.dirichlet(np.full(K, float(alpha)), size=K).T + boost * np.eye(K)
    return A / A.sum(axis=0, keepdims=True)


def specialist_matrix(K, k, xi, rng, leak=0.0):
    """Confusion whose row ``k`` lies within ``xi`` of ``e_k``.

    Column ``k`` is ``(1 - xi/2) e_k + (xi/2) u`` with ``u`` uniform on the
    simplex. In every other column the row-``k`` entry is
    ``leak * U(0,1) * xi / (2(K-1))`` and the rest of the mass is spread at
    random over the other rows.
    """
    A = np.empty((K, K))
    u = rng.gen.dirichlet(np.ones(K))
    A[:, k] = (xi / 2.0) * u
    A[k, k] += 1.0 - xi / 2.0
    others = [r for r in range(K) if r != k]
    for j in others:
        a_kj = leak * rng.gen.random() * xi / (2.0 * (K - 1))
        A[k, j] = a_kj
        A[others, j] = (1.0 - a_kj) * rng.gen.dirichlet(np.ones(K - 1))
    return A


def gen_confusions(spec, K, M, seed=0):
    """Draw ``M`` ground-truth confusions according to ``spec``.

    ``spec`` is a dict with ``kind`` one of:

    ``hammer_spammer``
        ``gamma`` and ``hammers`` (count, default 1). Randomly chosen
        hammers get :func:`hammer_matrix`, everyone else is a uniform
        spammer.
    ``specialist``
        ``xi`` (< 1) and optional ``leak``. For each class ``k`` a distinct
        random annotator becomes a class-``k`` specialist; the others are
        Dirichlet annotators with ``alpha`` (default 1) and ``boost``
        (default 0).
    ``dirichlet``
        ``alpha`` and ``boost`` for every annotator.
    """
    spec = dict(spec)
    kind = spec.pop("kind")
    rng = Rng(seed)
    pick = rng.spawn(0).gen
    A = np.empty((M, K, K))
    tags = [None] * M
    if kind == "hammer_spammer":
        n_ham = int(spec.get("hammers", 1))
        if n_ham > M:
            raise InvalidArgumentError(f"hammer count {n_ham} exceeds M={M}")
        hammers = set(pick.permutation(M)[:n_ham].tolist())
        for m in range(M):
            if m in hammers:
                A[m] = hammer_matrix(K, float(spec.get("gamma", 0.0)), rng.spawn(1, m))
                tags[m] = "hammer"
            else:
                A[m] = np.full((K, K), 1.0 / K)
                tags[m] = "spammer"
    elif kind == "specialist":
        xi = float(spec["xi"])
        if not 0 <= xi < 1:
            raise InvalidArgumentError(f"specialist xi must be in [0, 1), got {xi}")
        if M < K:
            raise InvalidArgumentError(f"need M >= K annotators for specialists, got M={M}")
        chosen = pick.permutation(M)[:K]
        role = {int(m): k for k, m in enumerate(chosen)}
        for m in range(M):
            if m in role:
                A[m] = specialist_matrix(K, role[m], xi, rng.spawn(1, m), float(spec.get("leak", 0.0)))
                tags[m] = f"specialist({role[m]})"
            else:
                A[m] = dirichlet_matrix(
                    K, spec.get("alpha", 1.0), spec.get("boost", 0.0), rng.spawn(1, m)
                )
                tags[m] = "dirichlet"
    elif kind == "dirichlet":
        for m in range(M):
            A[m] = dirichlet_matrix(K, spec.get("alpha", 1.0), spec.get("boost", 0.0), rng.spawn(1, m))
            tags[m] = "dirichlet"
    else:
        raise InvalidArgumentError(f"unknown confusion spec kind {kind!r}")
    return ConfusionEnsemble(A, tags)


# ---------------------------------------------------------------------------
# Annotation sampling
# ---------------------------------------------------------------------------


def sample_annotations(dataset: Dataset, ensemble: ConfusionEnsemble, p=0.1, seed=0, items=None):
    """Observe each (annotator, item) pair independently with probability ``p``.

    Kept pairs get a label drawn from ``A_m f_true(x_n)``; without stored
    posteriors the true label column ``A_m[:, y_n]`` is used. ``items``
    defaults to the train split.
    """
    if not 0 < p <= 1:
        raise InvalidArgumentError(f"observation probability must be in (0, 1], got {p}")
    if ensemble.K != dataset.K:
        raise InvalidArgumentError("ensemble and dataset disagree on K")
    items = dataset.indices("train") if items is None else np.asarray(items, dtype=np.int64)
    rng = Rng(seed)
    M = ensemble.M
    mask = rng.spawn(0).gen.random((len(items), M)) < p
    it_idx, annot = np.nonzero(mask)
    item = items[it_idx]
    if dataset.F_true is not None:
        F = dataset.F_true
    else:
        F = np.eye(dataset.K)[:, dataset.y]
    probs = kernels.gather_products(ensemble.A, F, item, annot)
    label = _categorical(probs, rng.spawn(1))
    return AnnotationSet(item, annot, label, dataset.N, M, dataset.K)


def build_P(A, F):
    """Stacked annotation probabilities ``P = W F`` of shape (M*K) x N."""
    A = np.asarray(A, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if A.shape[-1] != F.shape[0]:
        raise InvalidArgumentError("confusions and F disagree on K")
    return A.reshape(-1, A.shape[-1]) @ F
