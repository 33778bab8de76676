"""Hot inner kernels for hinge-style mining losses.

The refinement loop spends nearly all of its time scoring each sample
against every prototype, picking the k nearest incorrect classes, and
accumulating hinge terms plus their gradient w.r.t. the mapped embeddings.
That kernel is JIT-compiled with numba when available; a vectorized numpy
fallback implements the same arithmetic. Set ``LFA_NUMBA=0`` to force the
numpy path (useful for debugging and for the benchmark in benchmarks/).

Both paths use the same tie rule (smaller class index wins on equal
distance) and a fixed reduction order, so each backend is bitwise
deterministic run to run.
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("LFA_NUMBA", "1").strip().lower()
_want_numba = _env not in ("0", "false", "off", "no")

try:  # pragma: no cover - exercised implicitly
    if not _want_numba:
        raise ImportError("numba disabled via LFA_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        return wrap


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


@njit(cache=True)
def _hinge_loss_gu_jit(u, y, labels, margins, k):  # pragma: no cover - jitted
    n, d = u.shape
    c = y.shape[0]
    keff = min(k, c - 1)
    g = np.zeros((n, d))
    loss = 0.0
    nbr = np.empty(keff, np.int64)
    nbr_d = np.empty(keff, np.float64)
    dist = np.empty(c, np.float64)
    for i in range(n):
        ci = labels[i]
        for j in range(c):
            s = 0.0
            for t in range(d):
                diff = u[i, t] - y[j, t]
                s += diff * diff
            dist[j] = np.sqrt(s)
        m = 0
        for j in range(c):
            if j == ci:
                continue
            if m < keff:
                pos = m
                while pos > 0 and nbr_d[pos - 1] > dist[j]:
                    nbr_d[pos] = nbr_d[pos - 1]
                    nbr[pos] = nbr[pos - 1]
                    pos -= 1
                nbr_d[pos] = dist[j]
                nbr[pos] = j
                m += 1
            elif dist[j] < nbr_d[keff - 1]:
                pos = keff - 1
                while pos > 0 and nbr_d[pos - 1] > dist[j]:
                    nbr_d[pos] = nbr_d[pos - 1]
                    nbr[pos] = nbr[pos - 1]
                    pos -= 1
                nbr_d[pos] = dist[j]
                nbr[pos] = j
        dii = dist[ci]
        for idx in range(keff):
            j = nbr[idx]
            h = dii - dist[j] + margins[ci, j]
            if h > 0.0:
                loss += h
                # subgradient choice: unit direction is zero at a zero norm
                if dii > 1e-12:
                    for t in range(d):
                        g[i, t] += (u[i, t] - y[ci, t]) / dii
                if dist[j] > 1e-12:
                    for t in range(d):
                        g[i, t] -= (u[i, t] - y[j, t]) / dist[j]
    return loss, g


def _hinge_loss_gu_numpy(u, y, labels, margins, k):
    n = u.shape[0]
    c = y.shape[0]
    keff = min(k, c - 1)
    d2 = (u * u).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * u @ y.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    rows = np.arange(n)
    dii = dist[rows, labels]
    masked = dist.copy()
    masked[rows, labels] = np.inf
    nbr = np.argsort(masked, axis=1, kind="stable")[:, :keff]
    dij = np.take_along_axis(dist, nbr, axis=1)
    h = dii[:, None] - dij + margins[labels[:, None], nbr]
    active = h > 0.0
    loss = float(h[active].sum())

    g = np.zeros_like(u)
    n_active = active.sum(axis=1).astype(np.float64)
    safe_dii = np.where(dii > 1e-12, dii, np.inf)
    g += (u - y[labels]) * (n_active / safe_dii)[:, None]
    wgt = np.where(active & (dij > 1e-12), 1.0 / np.where(dij > 1e-12, dij, 1.0), 0.0)
    g -= u * wgt.sum(axis=1)[:, None]
    g += (wgt[:, :, None] * y[nbr]).sum(axis=1)
    return loss, g


def hinge_loss_gu(u, y, labels, margins, k):
    """Summed hinge loss and its gradient w.r.t. the mapped embeddings.

    u:       N x d mapped embeddings (x @ W)
    y:       C x d unit prototypes
    labels:  N ground-truth class indices
    margins: C x C margin lookup, indexed [gt_class, other_class]
    k:       neighbor budget (clamped to C - 1)

    Returns (loss_sum, G) with G of shape N x d; the caller divides by
    k_eff * N and chains through W.
    """
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    margins = np.ascontiguousarray(margins, dtype=np.float64)
    if NUMBA_ENABLED:
        return _hinge_loss_gu_jit(u, y, labels, margins, k)
    return _hinge_loss_gu_numpy(u, y, labels, margins, k)
