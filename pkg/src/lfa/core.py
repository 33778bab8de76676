"""Domain types, row normalization, seeded randomness, and shared numerics.

All arithmetic is done in float64 regardless of the on-disk precision of
feature files. Embeddings are l2-normalized exactly once at ingest; mapped
embeddings x @ W are deliberately NOT renormalized downstream, so hinge
distances are plain euclidean distances of the raw mapped vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, ShapeMismatch, ZeroRow

LinearMapKind = ("identity", "least_squares", "orthogonal", "beta", "refined", "ema")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator used for every stochastic operation.

    PCG64 streams are fixed by numpy for a given seed, independent of the
    platform, which is what the reproducibility contract relies on. No code
    in this package touches global numpy randomness.
    """
    return np.random.Generator(np.random.PCG64(seed))


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale every row of ``m`` to unit l2 norm, raising ZeroRow on degenerate rows."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ZeroRow(int(bad[0]))
    return m / norms[:, None]


@dataclass
class FeatureMatrix:
    """N x d embedding matrix; ``group_ids`` ties crop/frame rows to one item.

    Constructed through :func:`l2_normalize_rows` (or archive ingest) so rows
    are unit norm. :func:`lfa.refine.perturb` intentionally returns
    un-renormalized rows, which is why unit norm is not re-checked here.
    """

    data: np.ndarray
    group_ids: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeMismatch(f"features must be 2-D, got ndim={self.data.ndim}")
        n, d = self.data.shape
        if n < 1 or d < 2:
            raise ShapeMismatch(f"need N >= 1 and d >= 2, got shape {(n, d)}")
        if self.group_ids is not None:
            self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
            if self.group_ids.shape != (n,):
                raise ShapeMismatch("group_ids length must equal the row count")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def l2_normalize_rows(m: np.ndarray, group_ids=None) -> FeatureMatrix:
    """Ingest a raw matrix as a FeatureMatrix with unit-norm rows."""
    return FeatureMatrix(normalize_rows(m), group_ids=group_ids)


@dataclass
class PrototypeMatrix:
    """C x d class prototypes with their class names; rows unit norm."""

    data: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 2:
            raise ShapeMismatch("prototypes must be a 2-D matrix with C >= 2")
        if len(self.class_names) != self.data.shape[0]:
            raise ShapeMismatch("class_names length must equal the prototype count")
        if len(set(self.class_names)) != len(self.class_names):
            raise ShapeMismatch("class names must be unique")
        norms = np.linalg.norm(self.data, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ShapeMismatch("prototype rows must be unit norm (ingest normalizes)")

    @property
    def n_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def make_prototypes(raw: np.ndarray, class_names: list[str]) -> PrototypeMatrix:
    """Normalize raw prototype rows and wrap them."""
    return PrototypeMatrix(normalize_rows(raw), class_names=list(class_names))


@dataclass
class LinearMap:
    """Square alignment map W with a provenance tag.

    kind "orthogonal" enforces ||W^T W - I||_F < 1e-6, kind "identity"
    requires W == I exactly; the other tags carry no numeric invariant.
    """

    data: np.ndarray
    kind: str = "refined"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ShapeMismatch(f"mapping must be square, got {self.data.shape}")
        if self.kind not in LinearMapKind:
            raise ShapeMismatch(f"unknown mapping kind {self.kind!r}")
        d = self.data.shape[0]
        if self.kind == "orthogonal":
            gram_err = np.linalg.norm(self.data.T @ self.data - np.eye(d))
            if gram_err >= 1e-6:
                raise ShapeMismatch(f"orthogonal map violates W^T W = I ({gram_err:.2e})")
        elif self.kind == "identity" and not np.array_equal(self.data, np.eye(d)):
            raise ShapeMismatch("identity map must equal I exactly")

    @property
    def dim(self) -> int:
        return self.data.shape[0]


def identity_map(d: int) -> LinearMap:
    return LinearMap(np.eye(d), kind="identity")


@dataclass
class AssignmentMatrix:
    """N x C nonnegative sample-to-class coupling, hard one-hot or Sinkhorn-soft."""

    data: np.ndarray
    mode: str = "soft"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeMismatch("assignment must be 2-D")
        if self.mode not in ("hard", "soft"):
            raise ShapeMismatch(f"unknown assignment mode {self.mode!r}")
        if (self.data < 0).any():
            raise ShapeMismatch("assignment entries must be nonnegative")
        row_sums = self.data.sum(axis=1)
        if self.mode == "hard":
            one_hot = (self.data == 1.0).sum(axis=1) == 1
            if not (one_hot.all() and np.array_equal(row_sums, np.ones(len(row_sums)))):
                raise ShapeMismatch("hard assignment rows must be exactly one-hot")
        elif np.abs(row_sums - 1.0).max() > 1e-6:
            raise ShapeMismatch("soft assignment rows must sum to 1 within 1e-6")


def assignment_from_labels(labels: np.ndarray, n_classes: int) -> AssignmentMatrix:
    """Stack one-hot rows for ground-truth labels."""
    labels = np.asarray(labels, dtype=np.int64)
    p = np.zeros((labels.shape[0], n_classes))
    p[np.arange(labels.shape[0]), labels] = 1.0
    return AssignmentMatrix(p, mode="hard")


@dataclass
class LabeledFeatures:
    """Features plus a class index per row."""

    features: FeatureMatrix
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.features.n,):
            raise ShapeMismatch("labels length must equal the feature row count")
        if self.labels.size and self.labels.min() < 0:
            raise ShapeMismatch("labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.features.n


def svd(m: np.ndarray):
    """Full SVD returning (U, s, V) with m = U @ diag(s) @ V.T.

    Note the third factor is V, not V^T. Backed by LAPACK via numpy; a
    non-converging iteration surfaces as ConvergenceFailure.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.isfinite(m).all():
        raise ConvergenceFailure("input contains non-finite entries")
    try:
        u, s, vt = np.linalg.svd(m)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    return u, s, vt.T


def as_matrix(x) -> np.ndarray:
    """Accept FeatureMatrix / LinearMap / PrototypeMatrix or a plain array."""
    if isinstance(x, (FeatureMatrix, LinearMap, PrototypeMatrix, AssignmentMatrix)):
        return x.data
    return np.asarray(x, dtype=np.float64)
