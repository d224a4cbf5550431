"""Exact solver for the central-server fusion problems.

The objective is

    sum_k w_k { grad0_k . u_k + 0.5 u_k' hess_k u_k + lam * |u_k - u0|_2 }

over the center u0 and the per-task estimates u_k. Because the weight w_k
multiplies both the loss and the penalty, the per-task subproblem sees an
effective penalty of exactly lam.

Reparameterized in (u0, v_k = u_k - u0) the nonsmooth part is separable
across blocks, so exact block-coordinate descent (a weighted quadratic
solve for u0, the group proximal step for each v_k) is monotone and every
fixed point is a global minimizer. Working instead with u0's raw
subproblem (a weighted geometric median of the u_k) stalls as soon as all
tasks collapse onto the center, which breaks the large-lam pooled limit;
that is why the median is exposed as its own operation but not used inside
the solver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError, OrientationError
from .moments import FoldSurrogate, QuadraticSurrogate, aggregate_surrogate

MAX_SWEEPS = 10000
REL_TOL = 1e-10


@dataclass(frozen=True)
class FusionProblem:
    surrogates: tuple[QuadraticSurrogate, ...]
    lam: float

    def __post_init__(self):
        if not self.surrogates:
            raise ConfigurationError("fusion problem needs at least one surrogate")
        dims = {s.dim for s in self.surrogates}
        if len(dims) != 1:
            raise ConfigurationError(f"surrogates disagree on dimension: {sorted(dims)}")
        if self.lam < 0:
            raise ConfigurationError("penalty level must be nonnegative")
        object.__setattr__(self, "surrogates", tuple(self.surrogates))

    @property
    def dim(self) -> int:
        return self.surrogates[0].dim


@dataclass(frozen=True)
class FusionSolution:
    center: np.ndarray
    per_task: tuple[np.ndarray, ...]
    objective: float
    sweeps: int
    converged: bool
    active: np.ndarray  # per task: u_k equals the center exactly

    @property
    def u0(self) -> np.ndarray:
        return self.center


def fusion_objective(
    surrogates, lam: float, center: np.ndarray, per_task
) -> float:
    """Evaluate the fusion objective at (center, per-task estimates)."""
    total = 0.0
    for s, u in zip(surrogates, per_task):
        total += s.weight * (s.loss(u) + lam * float(np.linalg.norm(u - center)))
    return total


def _psd_factors(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition with orientation check; clips tiny negatives and
    adds a 1e-10 ridge when singular."""
    W = 0.5 * (W + W.T)
    evals, evecs = np.linalg.eigh(W)
    if float(evals.min()) < -1e-8:
        raise OrientationError(f"curvature has eigenvalue {evals.min():.3g} < -1e-8")
    evals = np.clip(evals, 0.0, None)
    if float(evals.min()) < 1e-10:
        evals = evals + 1e-10
    return evals, evecs


def _prox_with_factors(
    evals: np.ndarray, evecs: np.ndarray, c: np.ndarray, lam: float
) -> np.ndarray:
    c_norm = float(np.linalg.norm(c))
    if c_norm <= lam:
        return np.zeros_like(c)
    b = evecs.T @ c
    if lam == 0.0:
        return -(evecs @ (b / evals))

    def h(s: float) -> float:
        return float(np.sqrt(np.sum((b / (evals + lam / s)) ** 2))) - s

    s_hi = c_norm / float(evals.min())
    if h(s_hi) > 1e-12:
        raise NumericalError("prox bisection bracket failed at the upper end")
    s_lo = 0.0
    s_mid = s_hi
    for _ in range(600):
        s_mid = 0.5 * (s_lo + s_hi)
        val = h(s_mid)
        if abs(val) < 1e-12:
            break
        if val > 0:
            s_lo = s_mid
        else:
            s_hi = s_mid
    return -(evecs @ (b / (evals + lam / s_mid)))


def prox_group(W: np.ndarray, c: np.ndarray, lam: float) -> np.ndarray:
    """Exact minimizer of 0.5 v'Wv + c'v + lam*|v|_2.

    Returns the zero vector when |c| <= lam (the subgradient condition);
    otherwise solves (W + (lam/s) I) v = -c with s = |v| located by
    bisection on the scalar fixed-point residual.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if lam < 0:
        raise ConfigurationError("penalty level must be nonnegative")
    evals, evecs = _psd_factors(W)
    return _prox_with_factors(evals, evecs, c, lam)


def weighted_geometric_median(points, weights, tol: float = 1e-10) -> np.ndarray:
    """Minimizer of sum_k w_k |x_k - y|_2 by damped reweighting, with the
    standard subgradient fix when an iterate lands on a data point."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != pts.shape[0]:
        raise ConfigurationError("need one weight per point")
    if np.any(w <= 0):
        raise ConfigurationError("weights must be positive")
    if pts.shape[0] == 1:
        return pts[0].copy()
    # Merge exact duplicates so coincidence handling sees one point apiece.
    uniq: dict[bytes, int] = {}
    merged_pts, merged_w = [], []
    for row, wi in zip(pts, w):
        key = row.tobytes()
        if key in uniq:
            merged_w[uniq[key]] += wi
        else:
            uniq[key] = len(merged_pts)
            merged_pts.append(row)
            merged_w.append(float(wi))
    pts = np.asarray(merged_pts)
    w = np.asarray(merged_w)
    if pts.shape[0] == 1:
        return pts[0].copy()

    scale = 1.0 + float(np.max(np.abs(pts)))
    y = (w[:, None] * pts).sum(axis=0) / w.sum()
    for _ in range(10000):
        diff = pts - y
        dist = np.linalg.norm(diff, axis=1)
        on = dist < 1e-12 * scale
        if not np.any(on):
            inv = w / dist
            y_new = (inv[:, None] * pts).sum(axis=0) / inv.sum()
        else:
            j = int(np.flatnonzero(on)[0])
            others = np.ones(len(w), dtype=bool)
            others[j] = False
            inv = w[others] / dist[others]
            pull = (w[others][:, None] * diff[others] / dist[others][:, None]).sum(axis=0)
            r = float(np.linalg.norm(pull))
            if r <= w[j]:
                return y
            t_step = (inv[:, None] * pts[others]).sum(axis=0) / inv.sum()
            frac = min(1.0, w[j] / r)
            y_new = (1.0 - frac) * t_step + frac * y
        if float(np.linalg.norm(y_new - y)) < tol:
            return y_new
        y = y_new
    return y


def solve_fusion(problem: FusionProblem) -> FusionSolution:
    """Block-coordinate descent to the exact fusion solution.

    Starts from the unpenalized per-task minimizers with the center at
    their weighted mean, so the lam = 0 limit is exact at initialization.
    The objective is asserted nonincreasing every sweep.
    """
    surs = problem.surrogates
    lam = problem.lam
    d = problem.dim
    w = np.array([s.weight for s in surs])
    factors = [_psd_factors(s.hess) for s in surs]
    minimizers = [
        -(evecs @ ((evecs.T @ s.grad0) / evals))
        for s, (evals, evecs) in zip(surs, factors)
    ]
    center = np.einsum("k,kd->d", w, np.stack(minimizers)) / w.sum()

    if lam == 0.0:
        per_task = tuple(m.copy() for m in minimizers)
        obj = fusion_objective(surs, lam, center, per_task)
        active = np.array([bool(np.all(u == center)) for u in per_task])
        return FusionSolution(center, per_task, obj, 0, True, active)

    v = [m - center for m in minimizers]
    obj = fusion_objective(surs, lam, center, [center + vk for vk in v])
    # Weighted curvature sum (ridged factors) for the center update.
    A = sum(wk * (evecs * evals) @ evecs.T for wk, (evals, evecs) in zip(w, factors))
    converged = False
    sweeps = 0
    for sweep in range(1, MAX_SWEEPS + 1):
        sweeps = sweep
        rhs = -sum(
            wk * (s.grad0 + (evecs * evals) @ (evecs.T @ vk))
            for wk, s, vk, (evals, evecs) in zip(w, surs, v, factors)
        )
        center = np.linalg.solve(A, rhs)
        v = [
            _prox_with_factors(evals, evecs, s.grad0 + (evecs * evals) @ (evecs.T @ center), lam)
            for s, (evals, evecs) in zip(surs, factors)
        ]
        new_obj = fusion_objective(surs, lam, center, [center + vk for vk in v])
        if new_obj > obj + 1e-9 * (1.0 + abs(obj)):
            raise NumericalError(
                f"fusion objective increased on sweep {sweep}: {obj} -> {new_obj}"
            )
        decrease = obj - new_obj
        obj = new_obj
        if decrease <= REL_TOL * max(1.0, abs(obj)):
            converged = True
            break
    per_task = tuple(center + vk if np.any(vk != 0.0) else center.copy() for vk in v)
    active = np.array([not np.any(vk != 0.0) for vk in v])
    return FusionSolution(center, per_task, obj, sweeps, converged, active)


def solve_quadratic_fusion(thetas, variances, lam: float) -> FusionSolution:
    """Fusion of precomputed estimates weighted by inverse-variance matrices:
    minimize sum_k (theta_k - u_k)' V_k (theta_k - u_k) + lam |u_k - u0|.

    Mapped onto the quadratic surrogate form with hess = 2 V_k and
    grad0 = -2 V_k theta_k (equal up to a constant).
    """
    thetas = [np.atleast_1d(np.asarray(t, dtype=float)) for t in thetas]
    surs = []
    for k, (theta, V) in enumerate(zip(thetas, variances)):
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if float(np.linalg.eigvalsh(0.5 * (V + V.T)).min()) <= 0:
            raise ConfigurationError("inverse-variance matrices must be positive definite")
        surs.append(
            QuadraticSurrogate(task_id=k, grad0=-2.0 * V @ theta, hess=2.0 * V, weight=1.0)
        )
    return solve_fusion(FusionProblem(surrogates=tuple(surs), lam=lam))


def check_certificate(problem: FusionProblem, solution: FusionSolution, tol: float = 1e-6):
    """Per-task optimality residuals at a solution.

    Collapsed tasks must satisfy |grad0 + hess u0| <= lam + tol; the rest
    must have a smooth stationarity residual below tol.
    """
    lam = problem.lam
    failures = []
    for k, (s, u, flag) in enumerate(
        zip(problem.surrogates, solution.per_task, solution.active)
    ):
        if flag:
            resid = float(np.linalg.norm(s.grad0 + s.hess @ solution.center))
            if resid > lam + tol:
                failures.append((k, "collapsed", resid))
        else:
            gap = u - solution.center
            direction = gap / float(np.linalg.norm(gap))
            resid = float(np.linalg.norm(s.grad0 + s.hess @ u + lam * direction))
            if resid > tol:
                failures.append((k, "smooth", resid))
    return failures


def default_lambda_grid(K: int, n_bar: float, num: int = 12) -> list[float]:
    """Log-spaced penalty grid spanning [1e-3, 10] times sqrt(log K / n)."""
    scale = float(np.sqrt(np.log(max(K, 2)) / n_bar))
    return list(np.geomspace(1e-3 * scale, 10.0 * scale, num))


def task_weights(sizes) -> np.ndarray:
    """Aggregation weights n_k over the mean task size (all ones when equal)."""
    sizes = np.asarray(sizes, dtype=float)
    return sizes / sizes.mean()


def argmin_tie_to_larger(grid, losses) -> float:
    best_value, best_loss = None, np.inf
    for value, loss in zip(grid, losses):
        if loss <= best_loss:
            best_value, best_loss = value, loss
    return best_value


def tune_lambda(
    fold_surrogates: list[list[FoldSurrogate]],
    lambda_grid,
    weights=None,
) -> float:
    """Leave-one-fold-out penalty selection.

    For each candidate lam and held-out fold j, fusion runs on the
    aggregates built without fold j, and the held-out fold's surrogate
    scores the resulting per-task estimates; the candidate minimizing the
    fold-averaged, weight-summed loss wins, ties toward the larger value.
    """
    lambda_grid = [float(x) for x in lambda_grid]
    if not lambda_grid:
        raise ConfigurationError("penalty grid must be nonempty")
    if sorted(lambda_grid) != lambda_grid:
        raise ConfigurationError("penalty grid must be sorted ascending")
    if len(lambda_grid) == 1:
        return lambda_grid[0]
    K = len(fold_surrogates)
    if weights is None:
        weights = np.ones(K)
    folds = sorted({f.fold for task in fold_surrogates for f in task})
    mean_losses = []
    for lam in lambda_grid:
        total = 0.0
        for j in folds:
            retained = [
                aggregate_surrogate(task, weight=float(weights[k]), skip_fold=j)
                for k, task in enumerate(fold_surrogates)
            ]
            solution = solve_fusion(FusionProblem(surrogates=tuple(retained), lam=lam))
            for k, task in enumerate(fold_surrogates):
                held = [f for f in task if f.fold == j]
                if not held:
                    raise ConfigurationError(f"task {k} is missing fold {j}")
                hold = held[0]
                u = solution.per_task[k]
                total += float(weights[k]) * float(
                    hold.grad0 @ u + 0.5 * u @ hold.hess @ u
                )
        mean_losses.append(total / len(folds))
    return argmin_tie_to_larger(lambda_grid, mean_losses)
