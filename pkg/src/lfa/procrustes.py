"""Closed-form mapping solvers.

Three ways to fit a square map W aligning a source point set onto a target:
unconstrained least squares, the orthogonal (Procrustes) solution from the
SVD of the cross-covariance, and the beta-interpolation of the orthogonal
solution towards the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LinearMap, as_matrix, svd
from .errors import DegenerateCross, ShapeMismatch


@dataclass(frozen=True)
class BetaParam:
    """Interpolation weight in [0, 1]: 0 keeps the orthogonal solution, 1 gives I."""

    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ShapeMismatch(f"beta must lie in [0, 1], got {self.beta}")


def least_squares_map(source, target) -> LinearMap:
    """Minimize ||source @ W - target||_F^2 over all square W.

    Solved through the truncated-SVD pseudoinverse with singular values below
    1e-10 * sigma_max dropped, which yields the minimum-norm solution when
    the source is rank deficient (N < d few-shot pools).
    """
    s = as_matrix(source)
    t = as_matrix(target)
    if s.ndim != 2 or t.ndim != 2:
        raise ShapeMismatch("source and target must be 2-D")
    if s.shape != t.shape:
        raise ShapeMismatch(f"source {s.shape} and target {t.shape} differ")
    w = np.linalg.pinv(s, rcond=1e-10) @ t
    return LinearMap(w, kind="least_squares")


def orthogonal_procrustes(x, target) -> LinearMap:
    """Best orthogonal W for ||X W - T||_F^2, via SVD(X^T T) = U S V^T, W = U V^T.

    ``target`` is the already-multiplied P @ Y so the same entry point serves
    hard one-hot labels and Sinkhorn-soft assignments.
    """
    xd = as_matrix(x)
    td = as_matrix(target)
    if xd.shape != td.shape:
        raise ShapeMismatch(f"features {xd.shape} and target {td.shape} differ")
    cross = xd.T @ td
    if np.linalg.norm(cross) < 1e-12:
        raise DegenerateCross("X^T T is numerically zero; minimizer is non-unique")
    u, _, v = svd(cross)
    return LinearMap(u @ v.T, kind="orthogonal")


def beta_procrustes(w_op: LinearMap, beta) -> LinearMap:
    """Pull the orthogonal solution towards identity: W_beta = W_op - beta (W_op - I).

    Arithmetically identical to one gradient-descent step on the penalty
    (beta/2) ||W - I||_F^2 taken at W_op.
    """
    if w_op.kind != "orthogonal":
        raise ShapeMismatch("beta_procrustes expects an orthogonal input map")
    if not isinstance(beta, BetaParam):
        beta = BetaParam(float(beta))
    eye = np.eye(w_op.dim)
    w = w_op.data - beta.beta * (w_op.data - eye)
    return LinearMap(w, kind="beta")
