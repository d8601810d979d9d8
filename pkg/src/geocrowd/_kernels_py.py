"""Pure-numpy reference versions of the compiled kernels in ``_kernels.pyx``.

Index arrays are int64, value arrays float64; shapes follow the docstrings of
:mod:`geocrowd.kernels`.
"""
import numpy as np


def gather_products(A, F, item, annot):
    return np.einsum("tij,jt->ti", A[annot], F[:, item])


def scatter_grads(A, F, item, annot, dP):
    M, K, _ = A.shape
    dA = np.zeros((M, K * K))
    outer = dP[:, :, None] * F[:, item].T[:, None, :]
    np.add.at(dA, annot, outer.reshape(len(annot), K * K))
    dF = np.zeros_like(F)
    contrib = np.einsum("tij,ti->tj", A[annot], dP)
    np.add.at(dF.T, item, contrib)
    return dA.reshape(M, K, K), dF


def ds_log_posterior(logA, item, annot, label, log_prior, n_items):
    out = np.tile(np.asarray(log_prior, dtype=np.float64), (n_items, 1))
    np.add.at(out, item, logA[annot, label, :])
    return out


def ds_counts(q, item, annot, label, n_annotators):
    K = q.shape[1]
    counts = np.zeros((n_annotators, K, K))
    np.add.at(counts, (annot, label), q[item])
    return counts
