"""Gaussian-kernel regression: Nadaraya-Watson and local-linear fits.

The smoothing kernel is the standard multivariate Gaussian density scaled
by the bandwidth, H_h(u) = h^{-p} * (2*pi)^{-p/2} * exp(-|u/h|^2 / 2).
Bandwidths are selected by K-fold cross-validation over a candidate grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateDesignError

# Below this, a Nadaraya-Watson denominator is treated as underflowed and the
# prediction falls back to the nearest training point.
DENOM_UNDERFLOW = 1e-300

NW = "nadaraya_watson"
LOCAL_LINEAR = "local_linear"


@dataclass(frozen=True)
class KernelFit:
    """Training data plus a bandwidth; prediction is pure and thread-safe."""

    train_X: np.ndarray
    train_Y: np.ndarray
    bandwidth: float
    kind: str = NW

    def __post_init__(self):
        X = np.asarray(self.train_X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(self.train_Y, dtype=float)
        if X.shape[0] < 1:
            raise ConfigurationError("kernel fit needs at least one training row")
        if Y.shape[0] != X.shape[0]:
            raise ConfigurationError("train_X and train_Y row counts differ")
        if not self.bandwidth > 0:
            raise ConfigurationError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.kind not in (NW, LOCAL_LINEAR):
            raise ConfigurationError(f"unknown kernel fit kind {self.kind!r}")
        object.__setattr__(self, "train_X", X)
        object.__setattr__(self, "train_Y", Y)


def _as_2d(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def _sq_dists(query: np.ndarray, train: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (m_query, n_train)."""
    qq = np.sum(query * query, axis=1)[:, None]
    tt = np.sum(train * train, axis=1)[None, :]
    d2 = qq + tt - 2.0 * (query @ train.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def gaussian_weights(query: np.ndarray, train: np.ndarray, bandwidth: float) -> np.ndarray:
    """Kernel weights H_h(train_i - query_j), including normalizing constants."""
    query = _as_2d(query)
    train = _as_2d(train)
    p = train.shape[1]
    d2 = _sq_dists(query, train)
    const = bandwidth ** (-p) * (2.0 * np.pi) ** (-p / 2.0)
    return const * np.exp(-d2 / (2.0 * bandwidth**2))


def nw_predict_masked(fit: KernelFit, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nadaraya-Watson predictions plus a mask of underflow fallbacks.

    Where the weight denominator underflows, the returned value is the
    outcome of the single nearest training point and the mask is True.
    """
    query = _as_2d(query)
    if query.shape[1] != fit.train_X.shape[1]:
        raise ConfigurationError(
            f"query has {query.shape[1]} columns, training data has {fit.train_X.shape[1]}"
        )
    weights = gaussian_weights(query, fit.train_X, fit.bandwidth)
    denom = weights.sum(axis=1)
    fallback = denom < DENOM_UNDERFLOW
    values = np.empty(query.shape[0], dtype=float)
    ok = ~fallback
    if np.any(ok):
        values[ok] = (weights[ok] @ fit.train_Y) / denom[ok]
    if np.any(fallback):
        d2 = _sq_dists(query[fallback], fit.train_X)
        values[fallback] = fit.train_Y[np.argmin(d2, axis=1)]
    return values, fallback


def nw_predict(fit: KernelFit, query: np.ndarray) -> np.ndarray:
    """Kernel-weighted mean of the training outcomes at each query point."""
    values, _ = nw_predict_masked(fit, query)
    return values


def nw_predict_vector(
    fit_X: np.ndarray, fit_Y: np.ndarray, bandwidth: float, query: np.ndarray
) -> np.ndarray:
    """Nadaraya-Watson with a vector-valued response, one shared weight set.

    ``fit_Y`` has shape (n, q); returns (m, q). Underflowed query points get
    the nearest training row.
    """
    query = _as_2d(query)
    train = _as_2d(fit_X)
    weights = gaussian_weights(query, train, bandwidth)
    denom = weights.sum(axis=1)
    fallback = denom < DENOM_UNDERFLOW
    Y = np.asarray(fit_Y, dtype=float)
    out = np.empty((query.shape[0], Y.shape[1]), dtype=float)
    ok = ~fallback
    if np.any(ok):
        out[ok] = (weights[ok] @ Y) / denom[ok][:, None]
    if np.any(fallback):
        d2 = _sq_dists(query[fallback], train)
        out[fallback] = Y[np.argmin(d2, axis=1)]
    return out


def local_linear_predict(fit: KernelFit, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Local-linear fit on 1-D inputs: per query point, the intercept and
    slope of the kernel-weighted least-squares line. The slope is the
    derivative estimate.
    """
    train = fit.train_X
    if train.shape[1] != 1:
        raise ConfigurationError("local-linear prediction requires 1-D training inputs")
    if np.unique(train[:, 0]).size < 2:
        raise DegenerateDesignError("local-linear fit needs at least 2 distinct inputs")
    q = np.asarray(query, dtype=float).reshape(-1)
    weights = gaussian_weights(q[:, None], train, fit.bandwidth)
    centered = train[:, 0][None, :] - q[:, None]
    y = fit.train_Y
    s0 = weights.sum(axis=1)
    s1 = (weights * centered).sum(axis=1)
    s2 = (weights * centered * centered).sum(axis=1)
    t0 = weights @ y
    t1 = (weights * centered) @ y
    det = s0 * s2 - s1 * s1
    # Far from the data all weight piles onto one point and the 2x2 system
    # degenerates; fall back to the weighted mean with zero slope there.
    scale = np.maximum(s0 * s2, 1e-300)
    bad = ~((det > 0) & (det > 1e-12 * scale)) | (s0 < DENOM_UNDERFLOW)
    values = np.empty_like(s0)
    derivs = np.empty_like(s0)
    ok = ~bad
    values[ok] = (s2[ok] * t0[ok] - s1[ok] * t1[ok]) / det[ok]
    derivs[ok] = (s0[ok] * t1[ok] - s1[ok] * t0[ok]) / det[ok]
    if np.any(bad):
        nearest = np.argmin(np.abs(centered[bad]), axis=1)
        safe = s0[bad] >= DENOM_UNDERFLOW
        fb = np.where(safe, (t0[bad] / np.where(safe, s0[bad], 1.0)), y[nearest])
        values[bad] = fb
        derivs[bad] = 0.0
    return values, derivs


def predict(fit: KernelFit, query: np.ndarray) -> np.ndarray:
    if fit.kind == NW:
        return nw_predict(fit, query)
    values, _ = local_linear_predict(fit, query)
    return values


def _cv_fold_labels(n: int, folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    labels = np.empty(n, dtype=int)
    for pos, idx in enumerate(order):
        labels[idx] = pos % folds
    return labels


def cv_bandwidth(
    X: np.ndarray,
    Y: np.ndarray,
    candidates,
    folds: int = 5,
    seed: int = 0,
    kind: str = NW,
) -> float:
    """Pick the candidate bandwidth minimizing held-out squared error.

    Ties break toward the larger bandwidth. ``Y`` may be (n,) or (n, q);
    multi-response losses average across response columns.
    """
    candidates = [float(c) for c in candidates]
    if len(candidates) < 2:
        raise ConfigurationError("need at least 2 candidate bandwidths")
    if any(c <= 0 for c in candidates):
        raise ConfigurationError("candidate bandwidths must be positive")
    if sorted(candidates) != candidates:
        raise ConfigurationError("candidate bandwidths must be sorted ascending")
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float)
    n = X.shape[0]
    folds = min(folds, n)
    labels = _cv_fold_labels(n, folds, seed)
    best_h, best_loss = None, np.inf
    for h in candidates:
        sq_sum, count = 0.0, 0
        for f in range(folds):
            hold = labels == f
            if not np.any(hold) or np.all(hold):
                continue
            tx, ty = X[~hold], Y[~hold]
            if kind == NW:
                if ty.ndim == 1:
                    pred = nw_predict(KernelFit(tx, ty, h), X[hold])
                else:
                    pred = nw_predict_vector(tx, ty, h, X[hold])
            else:
                fit = KernelFit(tx, ty, h, kind=LOCAL_LINEAR)
                pred, _ = local_linear_predict(fit, X[hold])
            err = Y[hold] - pred
            sq_sum += float(np.sum(err * err))
            count += err.size
        loss = sq_sum / max(count, 1)
        if loss <= best_loss:
            best_h, best_loss = h, loss
    return best_h


def default_bandwidth_grid(X: np.ndarray, multipliers=(0.25, 0.5, 1.0, 2.0, 4.0)) -> list[float]:
    """Rule-of-thumb candidate grid: multipliers of n^(-1/(p+4)) times the
    pooled per-coordinate standard deviation."""
    X = _as_2d(X)
    n, p = X.shape
    pooled_sd = float(np.mean(np.std(X, axis=0)))
    if pooled_sd <= 0:
        pooled_sd = 1.0
    anchor = n ** (-1.0 / (p + 4)) * pooled_sd
    return [m * anchor for m in multipliers]
