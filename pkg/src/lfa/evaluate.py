"""Classification, accuracy, hubness and modality-gap diagnostics.

Predictions use the raw dot product of mapped embeddings with prototypes
(softmax over x W . Y^T / tau); rank diagnostics use euclidean distance.
With unit prototypes the two orderings coincide, which the test suite
checks as a property.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .core import FeatureMatrix, LabeledFeatures, as_matrix
from .errors import LengthMismatch, ShapeMismatch


def classify(x, w, y, tau: float = 0.01):
    """Class probabilities softmax(x W . Y^T / tau) and argmax predictions."""
    if tau <= 0:
        raise ShapeMismatch("tau must be positive")
    logits = as_matrix(x) @ as_matrix(w) @ as_matrix(y).T / tau
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p, logits.argmax(axis=1)


def top1_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise LengthMismatch(f"{predictions.shape} vs {labels.shape}")
    return float((predictions == labels).mean())


def gt_rank(x, w, y, labels) -> np.ndarray:
    """1 + number of incorrect prototypes strictly closer than the true one.

    Rank 1 means the ground-truth prototype is the nearest; equal distances
    do not increase the rank.
    """
    u = as_matrix(x) @ as_matrix(w)
    yd = as_matrix(y)
    labels = np.asarray(labels, dtype=np.int64)
    d2 = (u * u).sum(axis=1)[:, None] + (yd * yd).sum(axis=1)[None, :] - 2.0 * u @ yd.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    d_true = dist[np.arange(len(labels)), labels]
    return 1 + (dist < d_true[:, None]).sum(axis=1)


def modality_gap(x, y_per_sample) -> float:
    """Distance between the embedding centroid and the matched-prototype centroid."""
    xd = as_matrix(x)
    yd = np.asarray(y_per_sample, dtype=np.float64)
    if xd.shape != yd.shape:
        raise ShapeMismatch(f"matched rows required, got {xd.shape} vs {yd.shape}")
    return float(np.linalg.norm(xd.mean(axis=0) - yd.mean(axis=0)))


def pca_project(points: np.ndarray, out_dim: int = 2) -> np.ndarray:
    """Project onto the top principal components of the centered point cloud."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ShapeMismatch("need at least two points")
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:out_dim].T


def knn_baseline(train: LabeledFeatures, test: FeatureMatrix, k: int) -> np.ndarray:
    """Cosine k-nearest-neighbor vote on frozen features.

    Majority vote over the k nearest training rows; a tied vote falls back
    to the class of the single nearest neighbor among the tied classes.
    """
    if k > train.n:
        raise ShapeMismatch("k exceeds the training set size")
    sims = as_matrix(test) @ train.features.data.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    neighbor_labels = train.labels[order]
    n_classes = int(train.labels.max()) + 1
    preds = np.empty(test.n, dtype=np.int64)
    for i in range(test.n):
        counts = np.bincount(neighbor_labels[i], minlength=n_classes)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if len(tied) == 1:
            preds[i] = tied[0]
        else:
            for lbl in neighbor_labels[i]:  # nearest-first resolves the tie
                if counts[lbl] == best:
                    preds[i] = lbl
                    break
    return preds


def cross_interference(x, w, y, labels) -> float:
    """Mean cosine between mapped embeddings and prototypes of other classes.

    A labeled diagnostic of prototype entanglement; lower is better.
    """
    u = as_matrix(x) @ as_matrix(w)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    u = u / np.where(norms > 1e-12, norms, 1.0)
    cos = u @ as_matrix(y).T
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.ones_like(cos, dtype=bool)
    mask[np.arange(len(labels)), labels] = False
    return float(cos[mask].mean())


@dataclass
class EvalReport:
    """Aggregated evaluation: accuracy, per-class accuracy, rank diagnostics,
    and the modality gap of the mapped embeddings to their matched prototypes."""

    top1: float
    per_class_acc: list[float]
    mean_gt_rank: float
    rank_histogram: list[int]
    modality_gap: float

    def as_dict(self) -> dict:
        return {
            "top1": self.top1,
            "per_class_acc": self.per_class_acc,
            "mean_gt_rank": self.mean_gt_rank,
            "rank_histogram": self.rank_histogram,
            "modality_gap": self.modality_gap,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.as_dict(), **kwargs)


def build_report(x, labels, w, y, tau: float = 0.01) -> EvalReport:
    """Evaluate a mapping on labeled features against prototypes."""
    labels = np.asarray(labels, dtype=np.int64)
    yd = as_matrix(y)
    if labels.size and labels.max() >= yd.shape[0]:
        raise ShapeMismatch("labels must index prototype rows")
    _, preds = classify(x, w, y, tau)
    correct = preds == labels
    n_classes = yd.shape[0]
    per_class = []
    for c in range(n_classes):
        sel = labels == c
        per_class.append(float(correct[sel].mean()) if sel.any() else float("nan"))
    ranks = gt_rank(x, w, y, labels)
    hist = np.bincount(ranks - 1, minlength=n_classes)[:n_classes]
    mapped = as_matrix(x) @ as_matrix(w)
    gap = modality_gap(mapped, yd[labels])
    return EvalReport(
        top1=float(correct.mean()),
        per_class_acc=per_class,
        mean_gt_rank=float(ranks.mean()),
        rank_histogram=[int(v) for v in hist],
        modality_gap=gap,
    )


def write_rank_histogram_csv(ranks: np.ndarray, n_classes: int, path) -> None:
    hist = np.bincount(np.asarray(ranks) - 1, minlength=n_classes)[:n_classes]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "count"])
        for r, cnt in enumerate(hist, start=1):
            writer.writerow([r, int(cnt)])


def write_pca_csv(coords: np.ndarray, roles: list[str], path) -> None:
    if len(roles) != coords.shape[0]:
        raise LengthMismatch("one role per projected row required")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["role", "pc1", "pc2"])
        for role, row in zip(roles, coords):
            writer.writerow([role, repr(float(row[0])), repr(float(row[1]))])
