"""Unsupervised alignment: Sinkhorn soft assignment and the alternating loop.

Without labels, the sample-to-class coupling and the mapping are estimated
jointly: entropic optimal transport produces a soft assignment from the
current mapped embeddings, the mapping is re-fit against the assigned
prototypes, and the two steps alternate. The transport solver works in the
log domain so small epsilon values stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (AssignmentMatrix, FeatureMatrix, LinearMap,
                   PrototypeMatrix, LabeledFeatures, as_matrix, identity_map)
from .errors import NumericalUnderflow, ShapeMismatch
from .procrustes import beta_procrustes, orthogonal_procrustes
from .refine import RefineConfig, refine


@dataclass
class SinkhornConfig:
    """Entropic-OT knobs. Row marginals are always 1 per sample; the column
    marginal defaults to the balanced N/C and accepts custom class proportions."""

    epsilon: float = 0.05
    iters: int = 1000
    col_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ShapeMismatch("epsilon must be positive")
        if self.iters < 1:
            raise ShapeMismatch("iters must be >= 1")
        if self.col_weights is not None:
            self.col_weights = np.asarray(self.col_weights, dtype=np.float64)
            if (self.col_weights <= 0).any():
                raise ShapeMismatch("column weights must be positive")
            if abs(self.col_weights.sum() - 1.0) > 1e-6:
                raise ShapeMismatch("column weights must sum to 1")


def _logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) + np.log(np.exp(z - m).sum(axis=axis))
    return out


def _cosine_cost(x, w, y) -> np.ndarray:
    u = as_matrix(x) @ as_matrix(w)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    u = u / np.where(norms > 1e-12, norms, 1.0)
    return 1.0 - u @ as_matrix(y).T


def sinkhorn(x, w, y, cfg: SinkhornConfig, return_residuals: bool = False):
    """Soft assignment from cost 1 - cos(x W, y) via log-domain Sinkhorn.

    Alternates column and row normalizations of exp(-cost/eps) for
    cfg.iters sweeps, ending on the row update so row sums are exact to
    float precision; column sums approach N/C (or N * col_weights). The
    residual trace (max column violation per sweep) is returned on request.
    """
    cost = _cosine_cost(x, w, y)
    n, c = cost.shape
    if cfg.col_weights is not None and cfg.col_weights.shape != (c,):
        raise ShapeMismatch("column weights length must equal the class count")
    col_target = n * cfg.col_weights if cfg.col_weights is not None else np.full(c, n / c)

    eps = cfg.epsilon
    log_row = np.zeros(n)
    log_col = np.log(col_target)
    f = np.zeros(n)
    g = np.zeros(c)
    residuals = []
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite ==> raise below
        for _ in range(cfg.iters):
            g = eps * (log_col - _logsumexp((f[:, None] - cost) / eps, axis=0))
            f = eps * (log_row - _logsumexp((g[None, :] - cost) / eps, axis=1))
            if not (np.isfinite(f).all() and np.isfinite(g).all()):
                raise NumericalUnderflow(
                    f"transport kernel underflowed at epsilon={eps}; increase epsilon")
            if return_residuals:
                plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
                residuals.append(float(np.abs(plan.sum(axis=0) - col_target).max()))
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    if not np.isfinite(plan).all():
        raise NumericalUnderflow("transport plan underflowed")
    out = AssignmentMatrix(plan, mode="soft")
    if return_residuals:
        return out, residuals
    return out


def harden(p: AssignmentMatrix):
    """Row-wise argmax of a soft assignment; ties go to the lower class index."""
    if p.mode != "soft":
        raise ShapeMismatch("harden expects a soft assignment")
    labels = p.data.argmax(axis=1)
    hard = np.zeros_like(p.data)
    hard[np.arange(p.data.shape[0]), labels] = 1.0
    return AssignmentMatrix(hard, mode="hard"), labels


def ulfa(x: FeatureMatrix, y: PrototypeMatrix, n: int, beta,
         refine_cfg: RefineConfig, sk_cfg: SinkhornConfig) -> LinearMap:
    """Alternating unsupervised alignment.

    Initializes with Sinkhorn on the raw embeddings, an orthogonal fit
    against the soft-assigned prototypes, and the beta pull towards
    identity; then repeats n rounds of Sinkhorn on the mapped embeddings
    followed by refinement on the hardened pseudo-labels.
    """
    if n < 0:
        raise ShapeMismatch("n must be >= 0")
    p = sinkhorn(x, identity_map(x.dim), y, sk_cfg)
    w_op = orthogonal_procrustes(x, p.data @ y.data)
    w = beta_procrustes(w_op, beta)
    for i in range(n):
        p = sinkhorn(x, w, y, sk_cfg)
        _, pseudo = harden(p)
        round_cfg = replace(refine_cfg, seed=refine_cfg.seed + i)
        w, _, _ = refine(w, LabeledFeatures(x, pseudo), y, round_cfg)
    return w
