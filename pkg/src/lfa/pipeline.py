"""Supervised alignment pipeline: closed-form init plus refinement."""

from __future__ import annotations

import numpy as np

from .core import FeatureMatrix, LabeledFeatures, PrototypeMatrix
from .errors import LabelOutOfRange
from .procrustes import beta_procrustes, orthogonal_procrustes
from .refine import RefineConfig, refine


def fit_supervised(features: FeatureMatrix, labels: np.ndarray,
                   y: PrototypeMatrix, beta, cfg: RefineConfig):
    """Orthogonal fit against the label-matched prototypes, beta pull towards
    identity, then iterative refinement.

    Returns (mapping, EMA mapping or None, loss trace).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= y.n_classes):
        raise LabelOutOfRange("labels must index prototype rows")
    target = y.data[labels]
    w_op = orthogonal_procrustes(features, target)
    w_beta = beta_procrustes(w_op, beta)
    return refine(w_beta, LabeledFeatures(features, labels), y, cfg)
