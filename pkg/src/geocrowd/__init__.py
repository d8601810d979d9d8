"""End-to-end learning from crowdsourced labels.

Jointly fits a classifier and per-annotator confusion matrices by coupled
cross-entropy minimisation, optionally with log-det volume regularisers on
the classifier outputs or on the stacked confusions.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
