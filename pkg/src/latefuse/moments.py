"""Moment functions, cross-fitted initial estimators, and quadratic surrogates.

Every moment function here carries a global sign flip relative to the usual
residual-product orientation so that the averaged parameter gradient is
positive semidefinite; the root set is unchanged and the downstream fusion
objective becomes convex.

The surrogate for one task is the pair (grad0, hess): the one-step Taylor
expansion of the empirical moment around the fold-wise initial estimates,
    rho(u) = grad0 . u + 0.5 * u' hess u,
with grad0 = mean_j [ mean_fold m(theta_j) - hess_j theta_j ] and hess the
fold-size-weighted mean of the per-fold moment Jacobians (symmetrized).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import FoldPlan, ModelKind, TaskDataset, pin_first_coordinate
from .errors import (
    ConfigurationError,
    DegenerateDesignError,
    IllConditionedError,
    OrientationError,
)
from .kernels import (
    LOCAL_LINEAR,
    NW,
    KernelFit,
    cv_bandwidth,
    default_bandwidth_grid,
    local_linear_predict,
    nw_predict,
    nw_predict_vector,
)

PROPENSITY_CLIP = (0.05, 0.95)


@dataclass(frozen=True)
class BandwidthPolicy:
    """How bandwidths are chosen: cross-validated over a rule-of-thumb grid,
    or pinned to a fixed value (mainly for tests)."""

    multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    cv_folds: int = 5
    seed: int = 0
    fixed: float | None = None

    def select(self, X: np.ndarray, Y: np.ndarray, kind: str = NW) -> float:
        if self.fixed is not None:
            return float(self.fixed)
        grid = default_bandwidth_grid(X, self.multipliers)
        return cv_bandwidth(X, Y, grid, folds=self.cv_folds, seed=self.seed, kind=kind)


@dataclass(frozen=True)
class NuisanceSet:
    """Fitted nuisance functions for one model kind.

    Functions are plain callables over arrays, so oracle nuisances, kernel
    fits, and grid-fusion predictors are interchangeable.

    - ``outcome_mean``: X (m,p) -> (m,); E[Y|X] (partial-linear) or the
      treatment-averaged main effect (CATE).
    - ``exposure_mean``: X (m,p) -> (m,); E[T|X] for the partial-linear model.
    - ``propensity``: (t, X) -> (m,) in the clip range; t scalar or (m,).
    - ``link`` / ``link_deriv``: index (m,) -> (m,).
    - ``covariate_mean``: index (m,) -> (m, p-1); E[X_free | index].
    """

    kind: ModelKind
    outcome_mean: Callable | None = None
    exposure_mean: Callable | None = None
    propensity: Callable | None = None
    link: Callable | None = None
    link_deriv: Callable | None = None
    covariate_mean: Callable | None = None

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigurationError(
                f"nuisance set for {self.kind.value} is missing {missing}"
            )


def average_nuisances(a: NuisanceSet, b: NuisanceSet) -> NuisanceSet:
    """Average two nuisance sets pointwise: each function becomes the mean
    of the two underlying predictions."""
    if a.kind is not b.kind:
        raise ConfigurationError("cannot average nuisance sets of different kinds")

    def avg(fa, fb):
        if fa is None or fb is None:
            return None
        return lambda *args: 0.5 * (np.asarray(fa(*args)) + np.asarray(fb(*args)))

    return NuisanceSet(
        kind=a.kind,
        outcome_mean=avg(a.outcome_mean, b.outcome_mean),
        exposure_mean=avg(a.exposure_mean, b.exposure_mean),
        propensity=avg(a.propensity, b.propensity),
        link=avg(a.link, b.link),
        link_deriv=avg(a.link_deriv, b.link_deriv),
        covariate_mean=avg(a.covariate_mean, b.covariate_mean),
    )


# ----------------------------------------------------------------------
# Moment functions (sign-flipped; see module docstring)
# ----------------------------------------------------------------------

def plm_moment_values(
    X: np.ndarray, T: np.ndarray, Y: np.ndarray, theta: float, eta: NuisanceSet
) -> np.ndarray:
    eta.require("outcome_mean", "exposure_mean")
    resid_t = T - np.asarray(eta.exposure_mean(X), dtype=float)
    resid_y = Y - np.asarray(eta.outcome_mean(X), dtype=float)
    return resid_t * (resid_t * float(theta) - resid_y)


def plm_moment(z: tuple, theta: float, eta: NuisanceSet) -> float:
    """Partial-linear moment at one observation z = (x, t, y)."""
    x, t, y = z
    x = np.atleast_2d(np.asarray(x, dtype=float))
    vals = plm_moment_values(x, np.asarray([t], float), np.asarray([y], float), theta, eta)
    return float(vals[0])


def plm_moment_grad_values(
    X: np.ndarray, T: np.ndarray, eta: NuisanceSet
) -> np.ndarray:
    """Parameter gradient of the partial-linear moment: (t - g(x))^2."""
    resid_t = T - np.asarray(eta.exposure_mean(X), dtype=float)
    return resid_t * resid_t


def sim_moment_values(
    X: np.ndarray, Y: np.ndarray, theta: np.ndarray, eta: NuisanceSet
) -> np.ndarray:
    eta.require("link", "link_deriv", "covariate_mean")
    s = X @ theta
    resid = Y - np.asarray(eta.link(s), dtype=float)
    slope = np.asarray(eta.link_deriv(s), dtype=float)
    centered = X[:, 1:] - np.asarray(eta.covariate_mean(s), dtype=float)
    return -(resid * slope)[:, None] * centered


def sim_moment(z: tuple, theta: np.ndarray, eta: NuisanceSet) -> np.ndarray:
    """Single-index moment at one observation z = (x, y); length p-1."""
    x, y = z
    _check_pinned(theta)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return sim_moment_values(x, np.asarray([y], float), np.asarray(theta, float), eta)[0]


def cate_sim_moment_values(
    X: np.ndarray, T: np.ndarray, Y: np.ndarray, theta: np.ndarray, eta: NuisanceSet
) -> np.ndarray:
    eta.require("outcome_mean", "propensity", "link", "link_deriv", "covariate_mean")
    s = X @ theta
    pi = np.asarray(eta.propensity(T, X), dtype=float)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ConfigurationError("propensity values must lie strictly inside (0, 1)")
    resid = Y - np.asarray(eta.outcome_mean(X), dtype=float) - 0.5 * T * np.asarray(
        eta.link(s), dtype=float
    )
    slope = np.asarray(eta.link_deriv(s), dtype=float)
    centered = X[:, 1:] - np.asarray(eta.covariate_mean(s), dtype=float)
    return -(T / pi * resid * slope)[:, None] * centered


def cate_sim_moment(z: tuple, theta: np.ndarray, eta: NuisanceSet) -> np.ndarray:
    """Treatment-effect single-index moment at one z = (x, t, y); length p-1."""
    x, t, y = z
    _check_pinned(theta)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    vals = cate_sim_moment_values(
        x, np.asarray([t], float), np.asarray([y], float), np.asarray(theta, float), eta
    )
    return vals[0]


def _check_pinned(theta) -> None:
    theta = np.asarray(theta, dtype=float)
    if theta[0] != 1.0:
        raise ConfigurationError("single-index parameter must have first coordinate 1")


def moment_values(
    kind: ModelKind, data: TaskDataset, idx: np.ndarray, theta: np.ndarray, eta: NuisanceSet
) -> np.ndarray:
    """Per-sample moment values over ``idx`` rows; shape (len(idx), d)."""
    X = data.X[idx]
    Y = data.Y[idx]
    if kind is ModelKind.PLM:
        return plm_moment_values(X, data.T[idx], Y, float(theta[0]), eta)[:, None]
    if kind is ModelKind.SIM:
        return sim_moment_values(X, Y, theta, eta)
    return cate_sim_moment_values(X, data.T[idx], Y, theta, eta)


def _free_to_full(kind: ModelKind, free: np.ndarray) -> np.ndarray:
    if kind is ModelKind.PLM:
        return np.asarray(free, dtype=float)
    return np.concatenate([[1.0], np.asarray(free, dtype=float)])


def moment_jacobian(
    kind: ModelKind,
    data: TaskDataset,
    idx: np.ndarray,
    theta: np.ndarray,
    eta: NuisanceSet,
    step: float = 1e-5,
) -> np.ndarray:
    """Jacobian of the summed moment over ``idx`` w.r.t. the free coordinates.

    Analytic for the partial-linear model; central finite differences with
    per-coordinate step ``step * (1 + |theta_l|)`` otherwise (nuisances stay
    frozen during the perturbation).
    """
    if kind is ModelKind.PLM:
        grads = plm_moment_grad_values(data.X[idx], data.T[idx], eta)
        return np.array([[float(np.sum(grads))]])
    free = np.asarray(theta[1:], dtype=float)
    d = free.shape[0]
    jac = np.empty((d, d))
    for l in range(d):
        h = step * (1.0 + abs(free[l]))
        plus = free.copy()
        plus[l] += h
        minus = free.copy()
        minus[l] -= h
        m_plus = moment_values(kind, data, idx, _free_to_full(kind, plus), eta).sum(axis=0)
        m_minus = moment_values(kind, data, idx, _free_to_full(kind, minus), eta).sum(axis=0)
        jac[:, l] = (m_plus - m_minus) / (2.0 * h)
    return jac


# ----------------------------------------------------------------------
# Quadratic surrogates
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticSurrogate:
    """Linear and quadratic coefficients of one task's surrogate loss, plus
    its aggregation weight. These three numbers per task are the only
    statistics that cross the node boundary for parametric fusion."""

    task_id: int
    grad0: np.ndarray
    hess: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.grad0, dtype=float))
        H = np.atleast_2d(np.asarray(self.hess, dtype=float))
        if H.shape != (g.shape[0], g.shape[0]):
            raise ConfigurationError("hess shape must match grad0 dimension")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            raise ConfigurationError("surrogate coefficients must be finite")
        scale = 1.0 + float(np.max(np.abs(H)))
        if float(np.max(np.abs(H - H.T))) > 1e-10 * scale:
            raise ConfigurationError("hess must be symmetric to 1e-10")
        H = 0.5 * (H + H.T)
        if float(np.linalg.eigvalsh(H).min()) < -1e-8:
            raise OrientationError("hess has an eigenvalue below -1e-8")
        if not self.weight > 0:
            raise ConfigurationError("surrogate weight must be positive")
        object.__setattr__(self, "grad0", g)
        object.__setattr__(self, "hess", H)

    @property
    def dim(self) -> int:
        return self.grad0.shape[0]

    def loss(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        return float(self.grad0 @ u + 0.5 * u @ self.hess @ u)

    def minimizer(self) -> np.ndarray:
        H = self.hess
        if float(np.linalg.eigvalsh(H).min()) < 1e-10:
            H = H + 1e-10 * np.eye(self.dim)
        return np.linalg.solve(H, -self.grad0)


@dataclass(frozen=True)
class FoldSurrogate:
    """Per-fold mean of the surrogate coefficients, kept for leave-fold-out
    penalty tuning."""

    task_id: int
    fold: int
    grad0: np.ndarray
    hess: np.ndarray
    count: int


@dataclass(frozen=True)
class InitialFit:
    """Fold-wise initial estimates with their half-averaged nuisances."""

    kind: ModelKind
    fold_thetas: tuple[np.ndarray, ...]
    fold_nuisances: tuple[NuisanceSet, ...]
    pooled_theta: np.ndarray
    converged: tuple[bool, ...]
    plan: FoldPlan


# ----------------------------------------------------------------------
# Kernel-backed nuisance sources
# ----------------------------------------------------------------------

class KernelNuisanceSource:
    """Builds per-(fold, half) nuisance sets from Gaussian-kernel fits.

    ``for_half(j, m)`` returns nuisances *for evaluating* samples in half m
    of fold j's complement, i.e. trained on the opposite half. Bandwidths
    are tuned once per task and response on the full sample.
    """

    def __init__(
        self,
        data: TaskDataset,
        plan: FoldPlan,
        policy: BandwidthPolicy,
        kind: ModelKind = ModelKind.PLM,
    ):
        self.data = data
        self.plan = plan
        self.policy = policy
        self.kind = kind
        self._bw: dict[str, float] = {}
        self._cache: dict[tuple[int, int], NuisanceSet] = {}

    def _bandwidth(self, name: str, X, Y, kind=NW) -> float:
        if name not in self._bw:
            self._bw[name] = self.policy.select(X, Y, kind=kind)
        return self._bw[name]

    def _train_idx(self, j: int, m: int) -> np.ndarray:
        halves = self.plan.halves(j)
        return halves[1] if m == 1 else halves[0]

    def for_half(self, j: int, m: int) -> NuisanceSet:
        key = (j, m)
        if key not in self._cache:
            self._cache[key] = self._build(j, m)
        return self._cache[key]

    def _build(self, j: int, m: int) -> NuisanceSet:
        data = self.data
        idx = self._train_idx(j, m)
        X, Y = data.X[idx], data.Y[idx]
        kind = self.kind
        if kind is ModelKind.PLM:
            h_mu = self._bandwidth("mu", data.X, data.Y)
            h_g = self._bandwidth("g", data.X, data.T)
            mu_fit = KernelFit(X, Y, h_mu)
            g_fit = KernelFit(X, data.T[idx], h_g)
            return NuisanceSet(
                kind=kind,
                outcome_mean=lambda q, f=mu_fit: nw_predict(f, q),
                exposure_mean=lambda q, f=g_fit: nw_predict(f, q),
            )
        # CATE: treatment-arm outcome means and the propensity, all on X.
        T = data.T[idx]
        h_mu = self._bandwidth("mu", data.X, data.Y)
        h_pi = self._bandwidth("pi", data.X, (data.T == 1.0).astype(float))
        arm_fits = {}
        for t in (1.0, -1.0):
            arm = T == t
            if not np.any(arm):
                raise DegenerateDesignError(
                    f"task {data.task_id}: no samples with treatment {t:+.0f} in a training half"
                )
            arm_fits[t] = KernelFit(X[arm], Y[arm], h_mu)
        treated_fit = KernelFit(X, (T == 1.0).astype(float), h_pi)

        def outcome_mean(q, fits=arm_fits):
            return 0.5 * (nw_predict(fits[1.0], q) + nw_predict(fits[-1.0], q))

        def propensity(t, q, fit=treated_fit):
            p1 = np.clip(nw_predict(fit, q), *PROPENSITY_CLIP)
            t = np.asarray(t, dtype=float)
            return np.where(t > 0, p1, 1.0 - p1)

        return NuisanceSet(kind=kind, outcome_mean=outcome_mean, propensity=propensity)


def _index_nuisances(
    X_train: np.ndarray,
    resp_train: np.ndarray,
    theta: np.ndarray,
    h_link: float,
    h_cov: float,
) -> tuple[Callable, Callable, Callable]:
    """Link, link derivative, and covariate-mean functions fitted on the
    1-D index of the training rows."""
    s_train = X_train @ theta
    link_fit = KernelFit(s_train, resp_train, h_link, kind=LOCAL_LINEAR)
    X_free = X_train[:, 1:]

    def link(s, f=link_fit):
        return local_linear_predict(f, s)[0]

    def link_deriv(s, f=link_fit):
        return local_linear_predict(f, s)[1]

    def covariate_mean(s, sx=s_train, xf=X_free, h=h_cov):
        return nw_predict_vector(sx, xf, h, np.asarray(s, float).reshape(-1, 1))

    return link, link_deriv, covariate_mean


# ----------------------------------------------------------------------
# Initial estimators
# ----------------------------------------------------------------------

def fit_initial_plm(
    data: TaskDataset,
    plan: FoldPlan,
    policy: BandwidthPolicy | None = None,
    nuisance_source=None,
) -> InitialFit:
    """Cross-fitted partial-linear initial estimator.

    Per fold j, each half's samples are scored with nuisances trained on the
    opposite half, and the estimating equation solves in closed form:
    theta_j = sum (y - mu)(t - g) / sum (t - g)^2, with each half-sum scaled
    by its half size.
    """
    data.validate_for_kind(ModelKind.PLM)
    if nuisance_source is None:
        nuisance_source = KernelNuisanceSource(data, plan, policy or BandwidthPolicy())
    thetas, nuisances = [], []
    for j in range(1, plan.J + 1):
        halves = plan.halves(j)
        num = den = 0.0
        per_half = []
        for m, eval_idx in zip((1, 2), halves):
            eta = nuisance_source.for_half(j, m)
            per_half.append(eta)
            if eval_idx.size == 0:
                continue
            resid_t = data.T[eval_idx] - np.asarray(eta.exposure_mean(data.X[eval_idx]))
            resid_y = data.Y[eval_idx] - np.asarray(eta.outcome_mean(data.X[eval_idx]))
            num += float(np.mean(resid_y * resid_t))
            den += float(np.mean(resid_t * resid_t))
        if den < 1e-12:
            raise DegenerateDesignError(
                f"task {data.task_id}, fold {j}: exposure residual variation is numerically zero"
            )
        thetas.append(np.array([num / den]))
        nuisances.append(average_nuisances(per_half[0], per_half[1]))
    pooled = np.array([float(np.mean([t[0] for t in thetas]))])
    return InitialFit(
        kind=ModelKind.PLM,
        fold_thetas=tuple(thetas),
        fold_nuisances=tuple(nuisances),
        pooled_theta=pooled,
        converged=tuple(True for _ in thetas),
        plan=plan,
    )


def _ols_index_init(X: np.ndarray, resp: np.ndarray) -> np.ndarray:
    design = np.column_stack([np.ones(X.shape[0]), X])
    beta, *_ = np.linalg.lstsq(design, resp, rcond=None)
    slope = beta[1:]
    if abs(slope[0]) < 1e-6:
        out = np.zeros(X.shape[1])
        out[0] = 1.0
        return out
    return pin_first_coordinate(slope)


class IndexModelHalf:
    """Nuisance machinery for one (fold, half) pair of a single-index fit.

    Training data is the half opposite the evaluation half; theta-free
    nuisances (outcome mean, propensity) are fitted once, index-based ones
    are refitted at each outer iteration's current theta.
    """

    def __init__(
        self,
        kind,
        X_train,
        T_train,
        Y_train,
        policy,
        tag,
        outcome_mean=None,
        propensity=None,
    ):
        self.kind = kind
        self.X = X_train
        self.T = T_train
        self.Y = Y_train
        self.policy = policy
        self.tag = tag
        self._h_link = None
        self._h_cov = None
        self.outcome_mean = outcome_mean
        self.propensity = propensity
        if kind is ModelKind.CATE_SIM and (outcome_mean is None or propensity is None):
            h_mu = policy.select(X_train, Y_train)
            h_pi = policy.select(X_train, (T_train == 1.0).astype(float))
            arm_fits = {}
            for t in (1.0, -1.0):
                arm = T_train == t
                if not np.any(arm):
                    raise DegenerateDesignError(
                        f"{tag}: no samples with treatment {t:+.0f} in a training half"
                    )
                arm_fits[t] = KernelFit(X_train[arm], Y_train[arm], h_mu)
            treated = KernelFit(X_train, (T_train == 1.0).astype(float), h_pi)
            self.outcome_mean = lambda q, fits=arm_fits: 0.5 * (
                nw_predict(fits[1.0], q) + nw_predict(fits[-1.0], q)
            )
            self.propensity = lambda t, q, fit=treated: np.where(
                np.asarray(t, float) > 0,
                np.clip(nw_predict(fit, q), *PROPENSITY_CLIP),
                1.0 - np.clip(nw_predict(fit, q), *PROPENSITY_CLIP),
            )

    def _link_response(self) -> np.ndarray:
        if self.kind is ModelKind.SIM:
            return self.Y
        # Inverse-propensity pseudo-outcome whose conditional mean given the
        # index is the treatment-effect link.
        mu = self.outcome_mean(self.X)
        pi = self.propensity(self.T, self.X)
        return self.T * (self.Y - mu) / pi

    def at_theta(self, theta: np.ndarray) -> NuisanceSet:
        resp = self._link_response()
        s = self.X @ theta
        if self._h_link is None:
            self._h_link = self.policy.select(s, resp, kind=LOCAL_LINEAR)
            self._h_cov = self.policy.select(s, self.X[:, 1:])
        link, link_deriv, covariate_mean = _index_nuisances(
            self.X, resp, theta, self._h_link, self._h_cov
        )
        return NuisanceSet(
            kind=self.kind,
            outcome_mean=self.outcome_mean,
            propensity=self.propensity,
            link=link,
            link_deriv=link_deriv,
            covariate_mean=covariate_mean,
        )


def fit_initial_single_index(
    data: TaskDataset,
    plan: FoldPlan,
    kind: ModelKind,
    policy: BandwidthPolicy | None = None,
    max_outer: int = 30,
    nuisance_source=None,
) -> InitialFit:
    """Cross-fitted single-index initial estimator via damped Gauss-Newton.

    Per fold: start from a rescaled least-squares slope, then alternate
    nuisance re-estimation at the current index with one damped Gauss-Newton
    step on the free coordinates until the step norm drops below 1e-6.
    """
    if kind not in (ModelKind.SIM, ModelKind.CATE_SIM):
        raise ConfigurationError("use fit_initial_plm for the partial-linear model")
    data.validate_for_kind(kind)
    policy = policy or BandwidthPolicy()
    thetas, nuisances, flags = [], [], []
    for j in range(1, plan.J + 1):
        halves = plan.halves(j)
        half_data = []
        for eval_half, train_half in ((halves[0], halves[1]), (halves[1], halves[0])):
            if train_half.size == 0 or eval_half.size == 0:
                raise ConfigurationError("single-index fitting needs nonempty halves")
            if nuisance_source is not None:
                half = nuisance_source.half_for(j, len(half_data) + 1)
            else:
                half = IndexModelHalf(
                    kind,
                    data.X[train_half],
                    data.T[train_half] if data.T is not None else None,
                    data.Y[train_half],
                    policy,
                    tag=f"task {data.task_id}, fold {j}",
                )
            half_data.append((eval_half, half))

        comp = plan.complement_indices(j)
        if kind is ModelKind.SIM:
            theta = _ols_index_init(data.X[comp], data.Y[comp])
        else:
            seed_half = half_data[0][1]
            mu0 = seed_half.outcome_mean(data.X[comp])
            pi0 = seed_half.propensity(data.T[comp], data.X[comp])
            pseudo = data.T[comp] * (data.Y[comp] - mu0) / pi0
            theta = _ols_index_init(data.X[comp], pseudo)

        converged = False
        etas = None
        for _ in range(max_outer):
            etas = [half.at_theta(theta) for _, half in half_data]

            def mean_moment(th, etas=etas):
                total = np.zeros(data.p - 1)
                for (eval_half, _), eta in zip(half_data, etas):
                    vals = moment_values(kind, data, eval_half, th, eta)
                    total += vals.mean(axis=0)
                return total

            m0 = mean_moment(theta)
            jac = np.zeros((data.p - 1, data.p - 1))
            free = theta[1:]
            for l in range(data.p - 1):
                h = 1e-5 * (1.0 + abs(free[l]))
                plus = theta.copy()
                plus[1 + l] += h
                minus = theta.copy()
                minus[1 + l] -= h
                jac[:, l] = (mean_moment(plus) - mean_moment(minus)) / (2.0 * h)
            cond = np.linalg.cond(jac)
            if not np.isfinite(cond) or cond > 1e12:
                raise IllConditionedError(
                    f"task {data.task_id}, fold {j}: moment Jacobian condition {cond:.3g}"
                )
            delta = np.linalg.solve(jac, -m0)
            base_norm = float(np.linalg.norm(m0))
            step = 1.0
            improved = False
            for _ in range(20):
                cand = theta.copy()
                cand[1:] = free + step * delta
                if float(np.linalg.norm(mean_moment(cand))) < base_norm:
                    improved = True
                    break
                step *= 0.5
            if not improved:
                break
            theta = theta.copy()
            theta[1:] = free + step * delta
            if float(np.linalg.norm(step * delta)) < 1e-6:
                converged = True
                break
        # Nuisances at the final iterate, averaged across the two halves.
        final_etas = [half.at_theta(theta) for _, half in half_data]
        thetas.append(theta)
        nuisances.append(average_nuisances(final_etas[0], final_etas[1]))
        flags.append(converged)
    pooled = pin_first_coordinate(np.mean(np.stack(thetas), axis=0))
    return InitialFit(
        kind=kind,
        fold_thetas=tuple(thetas),
        fold_nuisances=tuple(nuisances),
        pooled_theta=pooled,
        converged=tuple(flags),
        plan=plan,
    )


# ----------------------------------------------------------------------
# Surrogate construction
# ----------------------------------------------------------------------

def build_fold_surrogates(data: TaskDataset, init: InitialFit) -> list[FoldSurrogate]:
    """Per-fold surrogate coefficients: fold-mean moment and Jacobian at the
    fold's initial estimate, evaluated on the held-out fold's samples with
    the fold's half-averaged nuisances."""
    plan = init.plan
    if plan.n != data.n:
        raise ConfigurationError("initial fit was produced from a different fold plan")
    out = []
    for j in range(1, plan.J + 1):
        idx = plan.fold_indices(j)
        theta = init.fold_thetas[j - 1]
        eta = init.fold_nuisances[j - 1]
        m_mean = moment_values(init.kind, data, idx, theta, eta).mean(axis=0)
        jac_mean = moment_jacobian(init.kind, data, idx, theta, eta) / idx.size
        hess = 0.5 * (jac_mean + jac_mean.T)
        free = theta if init.kind is ModelKind.PLM else theta[1:]
        grad0 = m_mean - hess @ free
        out.append(
            FoldSurrogate(task_id=data.task_id, fold=j, grad0=grad0, hess=hess, count=idx.size)
        )
    return out


def aggregate_surrogate(
    folds: list[FoldSurrogate], weight: float = 1.0, skip_fold: int | None = None
) -> QuadraticSurrogate:
    """Sample-size-weighted mean of per-fold surrogates, optionally leaving
    one fold out for validation."""
    kept = [f for f in folds if f.fold != skip_fold]
    if not kept:
        raise ConfigurationError("no folds left after exclusion")
    total = sum(f.count for f in kept)
    grad0 = sum(f.count * f.grad0 for f in kept) / total
    hess = sum(f.count * f.hess for f in kept) / total
    return QuadraticSurrogate(
        task_id=kept[0].task_id, grad0=grad0, hess=hess, weight=weight
    )


def build_surrogate(
    data: TaskDataset, init: InitialFit, weight: float = 1.0
) -> QuadraticSurrogate:
    """Aggregate surrogate over all folds (the statistic a node transmits)."""
    return aggregate_surrogate(build_fold_surrogates(data, init), weight=weight)
