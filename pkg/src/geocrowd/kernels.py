"""Backend selection for the annotation gather/scatter kernels.

The compiled extension ``geocrowd._kernels`` is used when it was built;
otherwise, or when ``GEOCROWD_PURE_PYTHON=1`` is set, the numpy versions in
``geocrowd._kernels_py`` are used. Both take:

``gather_products(A, F, item, annot)``
    ``P[t] = A[annot[t]] @ F[:, item[t]]`` for every annotation term ``t``.
``scatter_grads(A, F, item, annot, dP)``
    Adjoint of ``gather_products``: returns ``(dA, dF)``.
``ds_log_posterior(logA, item, annot, label, log_prior, n_items)``
    ``log_prior[k] + sum_t logA[annot[t], label[t], k]`` per item.
``ds_counts(q, item, annot, label, n_annotators)``
    Soft confusion counts ``counts[m, label, k] += q[item, k]``.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("GEOCROWD_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None


def compiled_available():
    return _compiled is not None


def backends():
    """Mapping of available backend name to implementation module."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _idx(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def gather_products(A, F, item, annot):
    return _impl.gather_products(_f64(A), _f64(F), _idx(item), _idx(annot))


def scatter_grads(A, F, item, annot, dP):
    return _impl.scatter_grads(_f64(A), _f64(F), _idx(item), _idx(annot), _f64(dP))


def ds_log_posterior(logA, item, annot, label, log_prior, n_items):
    return _impl.ds_log_posterior(
        _f64(logA), _idx(item), _idx(annot), _idx(label), _f64(log_prior), int(n_items)
    )


def ds_counts(q, item, annot, label, n_annotators):
    return _impl.ds_counts(_f64(q), _idx(item), _idx(annot), _idx(label), int(n_annotators))
