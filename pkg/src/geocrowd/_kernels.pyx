# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the annotation-indexed gather/scatter steps.

Same signatures and results as ``_kernels_py``; sums are accumulated in
annotation order.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def gather_products(double[:, :, ::1] A, double[:, ::1] F,
                    cnp.int64_t[::1] item, cnp.int64_t[::1] annot):
    cdef Py_ssize_t T = item.shape[0], K = A.shape[1]
    cdef Py_ssize_t t, i, j, n, m
    cdef double acc
    out = np.empty((T, K), dtype=np.float64)
    cdef double[:, ::1] P = out
    with nogil:
        for t in range(T):
            n = item[t]
            m = annot[t]
            for i in range(K):
                acc = 0.0
                for j in range(K):
                    acc = acc + A[m, i, j] * F[j, n]
                P[t, i] = acc
    return out


def scatter_grads(double[:, :, ::1] A, double[:, ::1] F,
                  cnp.int64_t[::1] item, cnp.int64_t[::1] annot,
                  double[:, ::1] dP):
    cdef Py_ssize_t T = item.shape[0], M = A.shape[0], K = A.shape[1]
    cdef Py_ssize_t t, i, j, n, m
    cdef double g
    dA_arr = np.zeros((M, K, K), dtype=np.float64)
    dF_arr = np.zeros((F.shape[0], F.shape[1]), dtype=np.float64)
    cdef double[:, :, ::1] dA = dA_arr
    cdef double[:, ::1] dF = dF_arr
    with nogil:
        for t in range(T):
            n = item[t]
            m = annot[t]
            for i in range(K):
                g = dP[t, i]
                if g == 0.0:
                    continue
                for j in range(K):
                    dA[m, i, j] += g * F[j, n]
                    dF[j, n] += A[m, i, j] * g
    return dA_arr, dF_arr


def ds_log_posterior(double[:, :, ::1] logA, cnp.int64_t[::1] item,
                     cnp.int64_t[::1] annot, cnp.int64_t[::1] label,
                     double[::1] log_prior, Py_ssize_t n_items):
    cdef Py_ssize_t T = item.shape[0], K = logA.shape[2]
    cdef Py_ssize_t t, k, n
    out_arr = np.empty((n_items, K), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for n in range(n_items):
            for k in range(K):
                out[n, k] = log_prior[k]
        for t in range(T):
            n = item[t]
            for k in range(K):
                out[n, k] += logA[annot[t], label[t], k]
    return out_arr


def ds_counts(double[:, ::1] q, cnp.int64_t[::1] item, cnp.int64_t[::1] annot,
              cnp.int64_t[::1] label, Py_ssize_t n_annotators):
    cdef Py_ssize_t T = item.shape[0], K = q.shape[1]
    cdef Py_ssize_t t, k
    counts_arr = np.zeros((n_annotators, K, K), dtype=np.float64)
    cdef double[:, :, ::1] counts = counts_arr
    with nogil:
        for t in range(T):
            for k in range(K):
                counts[annot[t], label[t], k] += q[item[t], k]
    return counts_arr
