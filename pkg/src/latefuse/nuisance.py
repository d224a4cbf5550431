"""Multi-task fusion of nuisance functions on a shared evaluation grid.

Each node reduces its training half to Nadaraya-Watson values on a common
grid; the server fuses the per-task grid vectors under an identity-curvature
version of the group-penalized objective (closed-form shrinkage per task),
and predictions are served from the nearest valid grid point.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .errors import ConfigurationError, NumericalError
from .fusion import MAX_SWEEPS, REL_TOL
from .kernels import DENOM_UNDERFLOW, gaussian_weights

LATTICE = "lattice"
LOW_DISCREPANCY = "low_discrepancy"


@dataclass(frozen=True)
class EvaluationGrid:
    """Finite evaluation set over the covariate domain box."""

    points: np.ndarray  # (size, p)
    kind: str
    lo: np.ndarray
    hi: np.ndarray
    step: float | None = None  # per-axis lattice step, None for low-discrepancy

    @property
    def size(self) -> int:
        return self.points.shape[0]


def build_grid(lo, hi, hbar: float, kind: str = "auto", budget: int = 512) -> EvaluationGrid:
    """Deterministic evaluation grid over the box [lo, hi]^p.

    A lattice with per-axis step close to hbar^2 when the dimension is at
    most 3 and the lattice fits the budget; otherwise a Halton sequence of
    exactly ``budget`` points.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ConfigurationError("domain box must have hi > lo on every axis")
    if budget < 8:
        raise ConfigurationError("grid budget must be at least 8")
    if hbar <= 0:
        raise ConfigurationError("bandwidth must be positive")
    p = lo.shape[0]
    step = hbar * hbar
    counts = np.maximum(2, np.round((hi - lo) / step).astype(int) + 1)
    lattice_size = int(np.prod(counts.astype(float)))
    use_lattice = {
        "auto": p <= 3 and lattice_size <= budget,
        LATTICE: True,
        LOW_DISCREPANCY: False,
    }.get(kind)
    if use_lattice is None:
        raise ConfigurationError(f"unknown grid kind {kind!r}")
    if use_lattice:
        if lattice_size > budget:
            raise ConfigurationError(
                f"lattice of {lattice_size} points exceeds budget {budget}"
            )
        axes = [np.linspace(lo[a], hi[a], counts[a]) for a in range(p)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.reshape(-1) for m in mesh], axis=1)
        actual_step = float((hi[0] - lo[0]) / (counts[0] - 1))
        return EvaluationGrid(points=points, kind=LATTICE, lo=lo, hi=hi, step=actual_step)
    sampler = qmc.Halton(d=p, scramble=False)
    unit = sampler.random(budget)
    points = lo[None, :] + unit * (hi - lo)[None, :]
    return EvaluationGrid(points=points, kind=LOW_DISCREPANCY, lo=lo, hi=hi, step=None)


def local_grid_stats(
    X: np.ndarray, Y: np.ndarray, grid: EvaluationGrid, hbar: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-grid-point linear coefficients of the local squared loss.

    Returns (grad0, valid): grad0[t] is minus the Nadaraya-Watson estimate
    at grid point t (the curvature is the identity and is not transmitted);
    valid is False where the kernel denominator underflows.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 1:
        raise ConfigurationError("grid statistics need a nonempty data fold")
    weights = gaussian_weights(grid.points, X, hbar)
    denom = weights.sum(axis=1)
    valid = denom >= DENOM_UNDERFLOW
    grad0 = np.full(grid.size, np.nan)
    if np.any(valid):
        grad0[valid] = -(weights[valid] @ np.asarray(Y, dtype=float)) / denom[valid]
    return grad0, valid


@dataclass(frozen=True)
class NuisanceGridFit:
    """Fused (or per-task) nuisance values on a grid; the unit of exchange
    for nuisance fusion. Predictions are only served from valid points."""

    grid: EvaluationGrid
    values: np.ndarray
    bandwidth: float
    lam: float
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.grid.size,) or self.valid.shape != (self.grid.size,):
            raise ConfigurationError("grid fit arrays must match the grid size")
        if np.any(~np.isfinite(self.values[self.valid])):
            raise ConfigurationError("grid fit has non-finite values at valid points")


def fuse_nuisance(
    stats: list[tuple[np.ndarray, np.ndarray]],
    weights,
    lam: float,
    grid: EvaluationGrid,
    hbar: float,
) -> list[NuisanceGridFit]:
    """Fuse per-task grid statistics under the identity-curvature objective.

    Restricted to the grid coordinates valid for every participating task,
    block-coordinate descent alternates a weighted-mean center update with
    the closed-form per-task shrinkage toward the center; coordinates valid
    only for one task keep that task's own estimate, and a task with no
    valid points is excluded with a warning.
    """
    K = len(stats)
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != K:
        raise ConfigurationError("need one weight per task")
    if lam < 0:
        raise ConfigurationError("penalty level must be nonnegative")
    means = np.stack([-g for g, _ in stats])  # (K, size)
    valids = np.stack([v for _, v in stats])
    included = np.array([bool(np.any(v)) for v in valids])
    for k in np.flatnonzero(~included):
        warnings.warn(
            f"task {k} has no valid grid points and is excluded from nuisance fusion",
            RuntimeWarning,
        )
    fused = means.copy()
    idx = np.flatnonzero(included)
    if idx.size >= 2:
        joint = np.all(valids[idx], axis=0)
        if np.any(joint):
            mu = means[np.ix_(idx, np.flatnonzero(joint))]
            wk = w[idx]
            if lam == 0.0:
                u = mu.copy()
            else:
                center = np.einsum("k,kt->t", wk, mu) / wk.sum()
                v = mu - center
                obj = _identity_objective(mu, wk, lam, center, v)
                for _ in range(MAX_SWEEPS):
                    center = np.einsum("k,kt->t", wk, mu - v) / wk.sum()
                    gap = mu - center
                    norms = np.linalg.norm(gap, axis=1)
                    shrink = np.where(norms > lam, 1.0 - lam / np.maximum(norms, 1e-300), 0.0)
                    v = shrink[:, None] * gap
                    new_obj = _identity_objective(mu, wk, lam, center, v)
                    if new_obj > obj + 1e-9 * (1.0 + abs(obj)):
                        raise NumericalError("nuisance fusion objective increased")
                    decrease = obj - new_obj
                    obj = new_obj
                    if decrease <= REL_TOL * max(1.0, abs(obj)):
                        break
                u = center[None, :] + v
                u[np.linalg.norm(mu - center, axis=1) <= lam] = center
            fused[np.ix_(idx, np.flatnonzero(joint))] = u
    out = []
    for k in range(K):
        out.append(
            NuisanceGridFit(
                grid=grid,
                values=fused[k],
                bandwidth=hbar,
                lam=lam,
                valid=valids[k].copy(),
            )
        )
    return out


def _identity_objective(mu, w, lam, center, v) -> float:
    # 0.5|u|^2 - mu.u per task, plus the group penalty; constants dropped.
    u = center[None, :] + v
    quad = 0.5 * np.sum(u * u, axis=1) - np.sum(mu * u, axis=1)
    pen = lam * np.linalg.norm(v, axis=1)
    return float(np.sum(w * (quad + pen)))


def predict_nearest(fit: NuisanceGridFit, x: np.ndarray) -> float:
    """Value at the Euclidean-nearest valid grid point (ties to the lowest
    grid index)."""
    return float(predict_nearest_many(fit, np.atleast_2d(np.asarray(x, dtype=float)))[0])


def predict_nearest_many(fit: NuisanceGridFit, X: np.ndarray) -> np.ndarray:
    if not np.any(fit.valid):
        raise ConfigurationError("grid fit has no valid points to predict from")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    pts = fit.grid.points
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(pts * pts, axis=1)[None, :]
        - 2.0 * X @ pts.T
    )
    d2[:, ~fit.valid] = np.inf
    return fit.values[np.argmin(d2, axis=1)]


def default_nuisance_lambda_grid(
    K: int, n: int, p: int, hbar: float, multipliers=(0.0, 0.3, 1.0, 3.0)
) -> list[float]:
    """Penalty candidates anchored at the kernel-rate scale
    sqrt(log(K * hbar^(-2p)) / (n * hbar^p)) + hbar^2."""
    anchor = float(
        np.sqrt(np.log(max(K, 2) * hbar ** (-2 * p)) / (n * hbar**p)) + hbar**2
    )
    return [m * anchor for m in multipliers]


@dataclass(frozen=True)
class FusedNuisanceSelection:
    """Tuning outcome for one task: chosen (bandwidth, penalty) and the loss
    surface over the candidate grid."""

    hbar: float
    lam: float
    losses: np.ndarray  # (len(hbar_grid), len(lambda_grid))


def half_train_indices(plan, j: int, m: int) -> np.ndarray:
    """Training rows for half m of fold j: the opposite half."""
    halves = plan.halves(j)
    return halves[1] if m == 1 else halves[0]


def half_eval_indices(plan, j: int, m: int) -> np.ndarray:
    halves = plan.halves(j)
    return halves[0] if m == 1 else halves[1]


def compute_half_stats(
    X: np.ndarray, resp: np.ndarray, plan, grid: EvaluationGrid, hbar: float, mask=None
) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
    """Grid statistics for every (fold, half), each trained on the opposite
    half (optionally intersected with a row mask, e.g. a treatment arm)."""
    out = {}
    for j in range(1, plan.J + 1):
        for m in (1, 2):
            train = half_train_indices(plan, j, m)
            if mask is not None:
                train = train[mask[train]]
            if train.size == 0:
                out[(j, m)] = (np.full(grid.size, np.nan), np.zeros(grid.size, dtype=bool))
            else:
                out[(j, m)] = local_grid_stats(X[train], resp[train], grid, hbar)
    return out


def holdout_loss_table(
    get_fit,
    X: np.ndarray,
    resp: np.ndarray,
    plan,
    n_hbar: int,
    n_lambda: int,
    mask=None,
) -> np.ndarray:
    """Held-half squared-error surface over the candidate grid for one task.

    ``get_fit(h_idx, l_idx, j, m)`` must return that combination's fused
    fit. Combinations a task cannot be scored on come back infinite.
    """
    losses = np.zeros((n_hbar, n_lambda))
    counts = np.zeros((n_hbar, n_lambda))
    dead = np.zeros((n_hbar, n_lambda), dtype=bool)
    for h_idx in range(n_hbar):
        for j in range(1, plan.J + 1):
            for m in (1, 2):
                hold = half_eval_indices(plan, j, m)
                if mask is not None:
                    hold = hold[mask[hold]]
                if hold.size == 0:
                    continue
                for l_idx in range(n_lambda):
                    fit = get_fit(h_idx, l_idx, j, m)
                    if not np.any(fit.valid):
                        dead[h_idx, l_idx] = True
                        continue
                    err = resp[hold] - predict_nearest_many(fit, X[hold])
                    losses[h_idx, l_idx] += float(np.mean(err * err))
                    counts[h_idx, l_idx] += 1
    losses = losses / np.maximum(counts, 1)
    losses[(counts == 0) | dead] = np.inf
    return losses


def select_pair(losses: np.ndarray, hbar_grid, lambda_grid) -> FusedNuisanceSelection:
    """Smallest loss wins; ties go to the larger bandwidth, then the larger
    penalty."""
    best, best_loss = (0, 0), np.inf
    for h_idx in range(len(hbar_grid)):
        for l_idx in range(len(lambda_grid)):
            if losses[h_idx, l_idx] <= best_loss:
                best_loss = losses[h_idx, l_idx]
                best = (h_idx, l_idx)
    return FusedNuisanceSelection(
        hbar=float(hbar_grid[best[0]]), lam=float(lambda_grid[best[1]]), losses=losses
    )


def tune_nuisance(
    X_tasks: list[np.ndarray],
    resp_tasks: list[np.ndarray],
    plans,
    hbar_grid,
    lambda_grid,
    lo,
    hi,
    weights=None,
    budget: int = 512,
    grid_kind: str = "auto",
    masks=None,
    return_fits: bool = False,
):
    """Task-specific tuning of (bandwidth, penalty) for fused nuisances.

    For every candidate pair, each fold-half's statistics come from the
    opposite half and the fused fit is scored on the held half via
    nearest-grid prediction; each task independently picks the pair
    minimizing its own averaged loss.

    With ``return_fits`` the fused fits at every task's chosen pair are also
    returned, keyed by (fold, half).
    """
    hbar_grid = [float(h) for h in hbar_grid]
    lambda_grid = [float(l) for l in lambda_grid]
    if not hbar_grid or not lambda_grid:
        raise ConfigurationError("bandwidth and penalty grids must be nonempty")
    K = len(X_tasks)
    if weights is None:
        weights = np.ones(K)
    if masks is None:
        masks = [None] * K
    fit_cache: dict[tuple[int, int, int, int], list[NuisanceGridFit]] = {}
    for h_idx, hbar in enumerate(hbar_grid):
        grid = build_grid(lo, hi, hbar, kind=grid_kind, budget=budget)
        per_task_stats = [
            compute_half_stats(X_tasks[k], resp_tasks[k], plans[k], grid, hbar, masks[k])
            for k in range(K)
        ]
        for j in range(1, plans[0].J + 1):
            for m in (1, 2):
                stats = [per_task_stats[k][(j, m)] for k in range(K)]
                for l_idx, lam in enumerate(lambda_grid):
                    fit_cache[(h_idx, l_idx, j, m)] = fuse_nuisance(
                        stats, weights, lam, grid, hbar
                    )
    selections = []
    for k in range(K):
        losses = holdout_loss_table(
            lambda h, l, j, m, k=k: fit_cache[(h, l, j, m)][k],
            X_tasks[k],
            resp_tasks[k],
            plans[k],
            len(hbar_grid),
            len(lambda_grid),
            masks[k],
        )
        selections.append(select_pair(losses, hbar_grid, lambda_grid))
    if not return_fits:
        return selections
    chosen = []
    for k, sel in enumerate(selections):
        h_idx = hbar_grid.index(sel.hbar)
        l_idx = lambda_grid.index(sel.lam)
        chosen.append(
            {
                (j, m): fit_cache[(h_idx, l_idx, j, m)][k]
                for j in range(1, plans[0].J + 1)
                for m in (1, 2)
            }
        )
    return selections, chosen
