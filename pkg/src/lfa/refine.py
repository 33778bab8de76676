"""Iterative mapping refinement.

The adaptive reranking loss pushes each mapped embedding away from its k
nearest incorrect class prototypes by a margin proportional to how similar
those prototypes are to the ground-truth one, while leaving the distance to
the ground-truth prototype in the objective so it cannot drift. Three
baseline losses (contrastive, triplet, CSLS-corrected cross-entropy) share
the same entry point. All gradients are hand-derived; neighbor sets are
re-mined every step and treated as constants under differentiation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import _kernels
from .core import (FeatureMatrix, LabeledFeatures, LinearMap, PrototypeMatrix,
                   as_matrix, make_rng)
from .errors import NonFiniteGradient, ShapeMismatch, UnsupportedVariant

LOSS_VARIANTS = ("arerank", "contrastive", "triplet", "csls")

# Reconstructed baseline constants: softmax temperature for the contrastive
# baseline und the fixed triplet margin (equal to the adaptive margin between
# orthogonal prototypes at s = 4).
CONTRASTIVE_TEMPERATURE = 0.05
TRIPLET_MARGIN = 0.25


@dataclass
class RefineConfig:
    """Hyperparameters of the refinement loop (defaults follow the training recipe)."""

    loss: str = "arerank"
    k: int = 3
    s: float = 4.0
    steps: int = 100
    lr: float = 5e-4
    lr_min: float = 1e-7
    weight_decay: float = 5e-4
    noise_std: float = 3.5e-2
    dropout_p: float = 2.5e-2
    ema: bool = False
    seed: int = 0
    batch: int | None = None

    def __post_init__(self):
        if self.loss not in LOSS_VARIANTS:
            raise UnsupportedVariant(f"unknown loss {self.loss!r}")
        if self.k < 1:
            raise ShapeMismatch("k must be >= 1")
        if self.steps < 0:
            raise ShapeMismatch("steps must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ShapeMismatch("dropout_p must lie in [0, 1)")
        if self.lr_min > self.lr:
            raise ShapeMismatch("lr_min must not exceed lr")
        if self.batch is not None and self.batch < 1:
            raise ShapeMismatch("batch must be positive when given")


@dataclass
class OptimizerState:
    """Adaptive-moment state with decoupled weight decay."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(d: int) -> OptimizerState:
    return OptimizerState(np.zeros((d, d)), np.zeros((d, d)))


@dataclass
class EmaState:
    """Exponential-moving-average dual mapping, initialized at identity."""

    w_tt: LinearMap
    t: int = 0
    total_steps: int = 0


def init_ema(d: int, total_steps: int) -> EmaState:
    return EmaState(LinearMap(np.eye(d), kind="ema"), t=0, total_steps=total_steps)


class TraceEntry(NamedTuple):
    step: int
    lr: float
    loss: float
    alpha: float | None


# ---------------------------------------------------------------------------
# margins and neighbor mining
# ---------------------------------------------------------------------------


def adaptive_margin(y: PrototypeMatrix, gt_class: int, other_class: int, s: float) -> float:
    """Margin (1 - cos(prototypes)) / s between the gt class and another class."""
    dot = float(y.data[gt_class] @ y.data[other_class])
    return max(0.0, (1.0 - dot) / s)


def margin_matrix(y, s: float) -> np.ndarray:
    """C x C lookup of adaptive margins, [gt, other]."""
    yd = as_matrix(y)
    return np.maximum(0.0, (1.0 - yd @ yd.T) / s)


def nearest_prototypes(xw: np.ndarray, y, gt_class: int, k: int) -> np.ndarray:
    """Indices of the k nearest incorrect prototypes to a mapped embedding.

    Ascending by euclidean distance, ties broken towards the lower class
    index; k is clamped to C - 1.
    """
    yd = as_matrix(y)
    dist = np.linalg.norm(yd - np.asarray(xw, dtype=np.float64)[None, :], axis=1)
    dist[gt_class] = np.inf
    order = np.argsort(dist, kind="stable")
    return order[: min(k, yd.shape[0] - 1)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _prep(x, labels, w, y):
    xd = as_matrix(x)
    yd = as_matrix(y)
    wd = as_matrix(w)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (xd.shape[0],):
        raise ShapeMismatch("labels length must match the batch")
    if labels.size and (labels.min() < 0 or labels.max() >= yd.shape[0]):
        raise ShapeMismatch("labels must index prototype rows")
    return xd, labels, wd, yd


def _hinge_loss_grad(x, labels, w, y, k: int, margins: np.ndarray):
    xd, labels, wd, yd = _prep(x, labels, w, y)
    keff = min(k, yd.shape[0] - 1)
    u = xd @ wd
    loss_sum, gu = _kernels.hinge_loss_gu(u, yd, labels, margins, k)
    scale = 1.0 / (keff * xd.shape[0])
    return loss_sum * scale, (xd.T @ gu) * scale


def arerank_loss(x, labels, w, y, k: int = 3, s: float = 4.0) -> float:
    """Mean over samples of (1/k) sum of active adaptive-margin hinges."""
    loss, _ = _hinge_loss_grad(x, labels, w, y, k, margin_matrix(y, s))
    return loss


def arerank_grad(x, labels, w, y, k: int = 3, s: float = 4.0) -> np.ndarray:
    """Analytic subgradient of arerank_loss w.r.t. W (mined neighbors held fixed)."""
    _, grad = _hinge_loss_grad(x, labels, w, y, k, margin_matrix(y, s))
    return grad


def _cosine_parts(xd, wd, yd):
    u = xd @ wd
    norms = np.linalg.norm(u, axis=1)
    safe = np.where(norms > 1e-12, norms, 1.0)
    uhat = u / safe[:, None]
    cos = uhat @ yd.T
    return u, safe, uhat, cos


def _chain_cosine(xd, gcos, yd, cos, uhat, norms):
    # d cos_ij / d u_i = (y_j - cos_ij * uhat_i) / ||u_i||
    du = gcos @ yd - uhat * (gcos * cos).sum(axis=1)[:, None]
    du /= norms[:, None]
    return xd.T @ du


def _contrastive_loss_grad(x, labels, w, y, temperature: float = CONTRASTIVE_TEMPERATURE):
    """Image-to-prototype cross-entropy over cosine similarities."""
    xd, labels, wd, yd = _prep(x, labels, w, y)
    n = xd.shape[0]
    _, norms, uhat, cos = _cosine_parts(xd, wd, yd)
    z = cos / temperature
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    loss = float(-np.log(p[np.arange(n), labels]).mean())
    err = p.copy()
    err[np.arange(n), labels] -= 1.0
    gcos = err / (temperature * n)
    return loss, _chain_cosine(xd, gcos, yd, cos, uhat, norms)


def _triplet_loss_grad(x, labels, w, y, k: int):
    """Hinge over the same mined negatives with the fixed margin."""
    yd = as_matrix(y)
    margins = np.full((yd.shape[0], yd.shape[0]), TRIPLET_MARGIN)
    return _hinge_loss_grad(x, labels, w, y, k, margins)


def _csls_loss_grad(x, labels, w, y, k: int):
    """Cross-entropy over hub-corrected scores 2 cos(x_i W, y_j) - r(y_j).

    r(y_j) is the mean cosine of prototype j to its k nearest mapped
    embeddings, recomputed every call; the neighbor sets are fixed under
    differentiation but the cosines inside r still carry gradient.
    """
    xd, labels, wd, yd = _prep(x, labels, w, y)
    n = xd.shape[0]
    keff = min(k, n)
    _, norms, uhat, cos = _cosine_parts(xd, wd, yd)

    # per prototype: k nearest mapped embeddings by cosine, ties to lower row
    order = np.argsort(-cos, axis=0, kind="stable")[:keff]  # keff x C
    cols = np.arange(yd.shape[0])
    r = cos[order, cols].mean(axis=0)

    scores = 2.0 * cos - r[None, :]
    z = scores - scores.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    loss = float(-np.log(p[np.arange(n), labels]).mean())

    err = p.copy()
    err[np.arange(n), labels] -= 1.0
    err /= n
    gcos = 2.0 * err
    hub_pull = err.sum(axis=0) / keff  # -d loss / d r_j, spread over the k neighbors
    gcos[order, np.broadcast_to(cols, order.shape)] -= hub_pull[None, :]
    return loss, _chain_cosine(xd, gcos, yd, cos, uhat, norms)


def baseline_loss(variant: str, x, labels, w, y, k: int = 3):
    """Loss value and gradient for one of the baseline refinement losses."""
    if variant == "contrastive":
        return _contrastive_loss_grad(x, labels, w, y)
    if variant == "triplet":
        return _triplet_loss_grad(x, labels, w, y, k)
    if variant == "csls":
        return _csls_loss_grad(x, labels, w, y, k)
    raise UnsupportedVariant(f"unknown baseline {variant!r}")


def loss_and_grad(variant: str, x, labels, w, y, k: int, s: float):
    """Unified dispatch used by the refinement loop."""
    if variant == "arerank":
        return _hinge_loss_grad(x, labels, w, y, k, margin_matrix(y, s))
    return baseline_loss(variant, x, labels, w, y, k)


# ---------------------------------------------------------------------------
# optimizer, schedules, perturbation
# ---------------------------------------------------------------------------


def optimizer_step(state: OptimizerState, w: LinearMap, grad: np.ndarray,
                   lr: float, weight_decay: float):
    """One bias-corrected adaptive-moment update with decoupled weight decay."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != w.data.shape:
        raise ShapeMismatch(f"gradient {grad.shape} vs mapping {w.data.shape}")
    if not np.isfinite(grad).all():
        raise NonFiniteGradient("gradient contains NaN or inf")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_w = w.data - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + weight_decay * w.data)
    new_state = replace(state, first_moment=m, second_moment=v, step_count=t)
    return new_state, LinearMap(new_w, kind="refined")


def cosine_lr(t: int, total: int, lr0: float, lr_min: float) -> float:
    """Half-cosine decay from lr0 at t=0 to lr_min at t=total."""
    if total <= 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def perturb(x: FeatureMatrix, noise_std: float, dropout_p: float,
            rng: np.random.Generator) -> FeatureMatrix:
    """Gaussian noise plus inverted dropout on the embeddings.

    Fresh draws each call, noise before the dropout mask; rows are NOT
    renormalized afterwards. With both knobs at zero the input comes back
    bit-identical.
    """
    data = x.data
    if noise_std == 0.0 and dropout_p == 0.0:
        return FeatureMatrix(data.copy(), group_ids=x.group_ids)
    out = data
    if noise_std > 0.0:
        out = out + rng.normal(0.0, noise_std, size=data.shape)
    if dropout_p > 0.0:
        keep = rng.random(data.shape) >= dropout_p
        out = out * keep / (1.0 - dropout_p)
    if out is data:
        out = data.copy()
    return FeatureMatrix(out, group_ids=x.group_ids)


# ---------------------------------------------------------------------------
# EMA dual mapping
# ---------------------------------------------------------------------------


def alpha_schedule(t: int, total: int) -> float:
    """EMA momentum: 0.9 rising to 1.0 on a log curve over the first half.

    alpha(t) = 0.9 + 0.1 ln(1+t)/ln(1+floor(total/2)) for t below the half
    point, 1.0 afterwards; nondecreasing in t.
    """
    half = total // 2
    if half <= 0 or t >= half:
        return 1.0
    return 0.9 + 0.1 * math.log1p(t) / math.log1p(half)


def ema_update(state: EmaState, w: LinearMap, alpha: float | None = None) -> EmaState:
    """W_tt <- alpha W_tt + (1 - alpha) W; alpha defaults to the log schedule."""
    if w.data.shape != state.w_tt.data.shape:
        raise ShapeMismatch("mapping shapes differ")
    if alpha is None:
        alpha = alpha_schedule(state.t, state.total_steps)
    mixed = alpha * state.w_tt.data + (1.0 - alpha) * w.data
    return EmaState(LinearMap(mixed, kind="ema"), t=state.t + 1,
                    total_steps=state.total_steps)


def average_maps(w: LinearMap, w_tt: LinearMap) -> LinearMap:
    """Single-mapping variant: entrywise mean of the task and EMA maps."""
    if w.data.shape != w_tt.data.shape:
        raise ShapeMismatch("mapping shapes differ")
    return LinearMap((w.data + w_tt.data) / 2.0, kind="refined")


# ---------------------------------------------------------------------------
# the refinement loop
# ---------------------------------------------------------------------------


def refine(w0: LinearMap, data: LabeledFeatures, y: PrototypeMatrix,
           cfg: RefineConfig):
    """Run cfg.steps refinement iterations from w0.

    Each step perturbs the (optionally mini-batched) embeddings, evaluates
    the configured loss and its gradient, and applies one cosine-scheduled
    optimizer step; when cfg.ema is set a dual mapping is accumulated.
    Returns (refined map, EMA map or None, loss trace of length cfg.steps).
    Identical inputs, config and seed give a bitwise-identical result.
    """
    if w0.dim != data.features.dim or y.dim != data.features.dim:
        raise ShapeMismatch("mapping / feature / prototype dimensions disagree")
    if data.labels.size and data.labels.max() >= y.n_classes:
        raise ShapeMismatch("labels must index prototype rows")

    trace: list[TraceEntry] = []
    ema_state = init_ema(w0.dim, cfg.steps) if cfg.ema else None
    if cfg.steps == 0:
        return w0, (ema_state.w_tt if ema_state else None), trace

    rng = make_rng(cfg.seed)
    n = data.features.n
    w = LinearMap(w0.data.copy(), kind="refined")
    state = init_optimizer(w0.dim)

    for t in range(cfg.steps):
        lr_t = cosine_lr(t, cfg.steps, cfg.lr, cfg.lr_min)
        if cfg.batch is not None and cfg.batch < n:
            idx = rng.choice(n, size=cfg.batch, replace=False)
            xb = FeatureMatrix(data.features.data[idx])
            lb = data.labels[idx]
        else:
            xb = data.features
            lb = data.labels
        xp = perturb(xb, cfg.noise_std, cfg.dropout_p, rng)
        loss, grad = loss_and_grad(cfg.loss, xp, lb, w, y, cfg.k, cfg.s)
        state, w = optimizer_step(state, w, grad, lr_t, cfg.weight_decay)
        alpha = None
        if ema_state is not None:
            alpha = alpha_schedule(ema_state.t, ema_state.total_steps)
            ema_state = ema_update(ema_state, w, alpha)
        trace.append(TraceEntry(t, lr_t, loss, alpha))

    return w, (ema_state.w_tt if ema_state else None), trace


def write_trace_csv(trace: list[TraceEntry], path) -> None:
    """Dump the loss trace as (step, lr, loss, alpha) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "alpha"])
        for entry in trace:
            alpha = "" if entry.alpha is None else repr(entry.alpha)
            writer.writerow([entry.step, repr(entry.lr), repr(entry.loss), alpha])
