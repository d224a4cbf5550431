"""End-to-end estimation without the federation layer.

``fit_direct`` runs the full method as straight-line library calls: fold
plans, (optionally fused) nuisance estimation, cross-fitted initial
estimators, surrogate construction, penalty tuning, and the final fusion
solve. The federation runtime must reproduce its output exactly; keeping
this path free of any messaging machinery is what makes that a meaningful
check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ModelKind, ParamEstimate, TaskDataset, make_fold_plan
from .errors import ConfigurationError
from .fusion import (
    FusionProblem,
    FusionSolution,
    default_lambda_grid,
    solve_fusion,
    task_weights,
    tune_lambda,
)
from .moments import (
    PROPENSITY_CLIP,
    BandwidthPolicy,
    IndexModelHalf,
    InitialFit,
    NuisanceSet,
    aggregate_surrogate,
    build_fold_surrogates,
    fit_initial_plm,
    fit_initial_single_index,
)
from .nuisance import (
    FusedNuisanceSelection,
    default_nuisance_lambda_grid,
    half_train_indices,
    predict_nearest_many,
    tune_nuisance,
)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs besides the datasets themselves."""

    kind: ModelKind
    folds: int = 5
    seed: int = 0
    lambda_grid: tuple[float, ...] | None = None  # None: rate-anchored default
    bandwidth: BandwidthPolicy = field(default_factory=BandwidthPolicy)
    max_outer: int = 30
    nuisance_fusion: bool = False
    nuis_hbar_grid: tuple[float, ...] | None = None
    nuis_lambda_grid: tuple[float, ...] | None = None
    grid_budget: int | None = None  # None: min(512, 8 * max task size)
    grid_kind: str = "auto"
    domain_lo: float = -1.0
    domain_hi: float = 1.0
    max_round_bytes: int = 16_000_000


@dataclass
class PipelineResult:
    kind: ModelKind
    estimates: list[ParamEstimate]
    center: np.ndarray
    lambda_selected: float
    fusion: FusionSolution
    initial_pooled: list[np.ndarray]
    initial_converged: list[tuple[bool, ...]]
    nuisance_selections: dict[str, list[FusedNuisanceSelection]] | None = None
    audit: object | None = None


def validate_tasks(datasets: list[TaskDataset], kind: ModelKind) -> int:
    if not datasets:
        raise ConfigurationError("need at least one task dataset")
    p = datasets[0].p
    for d in datasets:
        d.validate_for_kind(kind)
        if d.p != p:
            raise ConfigurationError("all tasks must share the covariate dimension")
    return p


def task_fold_seed(seed: int, task_index: int) -> int:
    return seed * 100003 + task_index


def task_policy(base: BandwidthPolicy, task_index: int) -> BandwidthPolicy:
    return replace(base, seed=base.seed + 7919 * task_index)


def estimate_from_free(kind: ModelKind, free: np.ndarray) -> ParamEstimate:
    if kind is ModelKind.PLM:
        return ParamEstimate(theta=np.asarray(free, dtype=float), kind=kind)
    return ParamEstimate(theta=np.concatenate([[1.0], free]), kind=kind)


def half_sizes(n: int, J: int) -> int:
    """Approximate size of one training half (complement of a fold, halved)."""
    return max(2, (n - math.ceil(n / J)) // 2)


def default_nuis_hbar_grid(
    n_bar: float, J: int, p: int, pooled_sd: float, multipliers=(0.5, 1.0, 2.0)
) -> list[float]:
    n_half = half_sizes(int(round(n_bar)), J)
    anchor = n_half ** (-1.0 / (p + 4)) * pooled_sd
    return [m * anchor for m in multipliers]


def resolve_nuisance_grids(
    config: PipelineConfig, K: int, n_bar: float, p: int, pooled_sd: float
) -> tuple[list[float], list[float]]:
    if config.nuis_hbar_grid is not None:
        hbar_grid = [float(h) for h in config.nuis_hbar_grid]
    else:
        hbar_grid = default_nuis_hbar_grid(n_bar, config.folds, p, pooled_sd)
    if config.nuis_lambda_grid is not None:
        lam_grid = [float(x) for x in config.nuis_lambda_grid]
    else:
        n_half = half_sizes(int(round(n_bar)), config.folds)
        anchor = sorted(hbar_grid)[len(hbar_grid) // 2]
        lam_grid = default_nuisance_lambda_grid(K, n_half, p, anchor)
    return hbar_grid, lam_grid


def fused_response_specs(kind: ModelKind, data: TaskDataset):
    """The per-kind nuisance regressions that go through grid fusion:
    (name, response vector, optional row mask)."""
    if kind is ModelKind.PLM:
        return [("outcome", data.Y, None), ("exposure", data.T, None)]
    if kind is ModelKind.CATE_SIM:
        treated = (data.T == 1.0).astype(float)
        return [
            ("outcome_plus", data.Y, data.T == 1.0),
            ("outcome_minus", data.Y, data.T == -1.0),
            ("treated", treated, None),
        ]
    return []


class FusedPLMSource:
    """Per-(fold, half) nuisances for the partial-linear model backed by
    fused grid fits."""

    def __init__(self, fits: dict[str, dict]):
        self._mu = fits["outcome"]
        self._g = fits["exposure"]

    def for_half(self, j: int, m: int) -> NuisanceSet:
        mu_fit = self._mu[(j, m)]
        g_fit = self._g[(j, m)]
        return NuisanceSet(
            kind=ModelKind.PLM,
            outcome_mean=lambda q, f=mu_fit: predict_nearest_many(f, q),
            exposure_mean=lambda q, f=g_fit: predict_nearest_many(f, q),
        )


class FusedCATESource:
    """Per-(fold, half) single-index nuisance halves whose theta-free parts
    (main effect, propensity) come from fused grid fits."""

    def __init__(self, data: TaskDataset, plan, policy: BandwidthPolicy, fits):
        self.data = data
        self.plan = plan
        self.policy = policy
        self.fits = fits

    def half_for(self, j: int, m: int) -> IndexModelHalf:
        plus = self.fits["outcome_plus"][(j, m)]
        minus = self.fits["outcome_minus"][(j, m)]
        prop = self.fits["treated"][(j, m)]

        def outcome_mean(q, a=plus, b=minus):
            return 0.5 * (predict_nearest_many(a, q) + predict_nearest_many(b, q))

        def propensity(t, q, f=prop):
            p1 = np.clip(predict_nearest_many(f, q), *PROPENSITY_CLIP)
            return np.where(np.asarray(t, dtype=float) > 0, p1, 1.0 - p1)

        train = half_train_indices(self.plan, j, m)
        return IndexModelHalf(
            ModelKind.CATE_SIM,
            self.data.X[train],
            self.data.T[train],
            self.data.Y[train],
            self.policy,
            tag=f"task {self.data.task_id}, fold {j} (fused)",
            outcome_mean=outcome_mean,
            propensity=propensity,
        )


def build_fused_sources(datasets, plans, policies, config: PipelineConfig):
    """Tune task-specific (bandwidth, penalty) per fused response and wrap
    the chosen grid fits as nuisance sources, one per task."""
    kind = config.kind
    K = len(datasets)
    p = datasets[0].p
    sizes = [d.n for d in datasets]
    weights = task_weights(sizes)
    pooled_sd = float(np.mean([np.mean(np.std(d.X, axis=0)) for d in datasets]))
    hbar_grid, lam_grid = resolve_nuisance_grids(config, K, float(np.mean(sizes)), p, pooled_sd)
    budget = config.grid_budget or min(512, 8 * max(sizes))
    lo = np.full(p, config.domain_lo)
    hi = np.full(p, config.domain_hi)
    specs = [fused_response_specs(kind, d) for d in datasets]
    selections: dict[str, list[FusedNuisanceSelection]] = {}
    chosen: dict[str, list[dict]] = {}
    for r, (name, _, _) in enumerate(specs[0]):
        sel, fits = tune_nuisance(
            [d.X for d in datasets],
            [specs[k][r][1] for k in range(K)],
            plans,
            hbar_grid,
            lam_grid,
            lo,
            hi,
            weights=weights,
            budget=budget,
            grid_kind=config.grid_kind,
            masks=[specs[k][r][2] for k in range(K)],
            return_fits=True,
        )
        selections[name] = sel
        chosen[name] = fits
    sources = []
    for k in range(K):
        fits_k = {name: chosen[name][k] for name in chosen}
        if kind is ModelKind.PLM:
            sources.append(FusedPLMSource(fits_k))
        else:
            sources.append(FusedCATESource(datasets[k], plans[k], policies[k], fits_k))
    return sources, selections


def fit_task_initial(
    data: TaskDataset, plan, kind: ModelKind, policy: BandwidthPolicy, max_outer: int, source=None
) -> InitialFit:
    if kind is ModelKind.PLM:
        return fit_initial_plm(data, plan, policy, nuisance_source=source)
    return fit_initial_single_index(
        data, plan, kind, policy, max_outer=max_outer, nuisance_source=source
    )


def resolve_lambda_grid(config: PipelineConfig, K: int, n_bar: float) -> list[float]:
    if config.lambda_grid is not None:
        grid = [float(x) for x in config.lambda_grid]
        if not grid:
            raise ConfigurationError("penalty grid must be nonempty")
        return grid
    return default_lambda_grid(K, n_bar)


def fit_direct(datasets: list[TaskDataset], config: PipelineConfig) -> PipelineResult:
    """Run the whole pipeline as plain library calls (no federation)."""
    kind = config.kind
    validate_tasks(datasets, kind)
    K = len(datasets)
    sizes = [d.n for d in datasets]
    weights = task_weights(sizes)
    plans = [
        make_fold_plan(d.n, config.folds, task_fold_seed(config.seed, k))
        for k, d in enumerate(datasets)
    ]
    policies = [task_policy(config.bandwidth, k) for k in range(K)]

    sources = [None] * K
    selections = None
    if config.nuisance_fusion and kind is not ModelKind.SIM:
        sources, selections = build_fused_sources(datasets, plans, policies, config)

    inits, fold_surs = [], []
    for k, d in enumerate(datasets):
        init = fit_task_initial(d, plans[k], kind, policies[k], config.max_outer, sources[k])
        inits.append(init)
        fold_surs.append(build_fold_surrogates(d, init))

    lam_grid = resolve_lambda_grid(config, K, float(np.mean(sizes)))
    lam = tune_lambda(fold_surs, lam_grid, weights) if len(lam_grid) > 1 else lam_grid[0]
    surrogates = tuple(
        aggregate_surrogate(fold_surs[k], weight=float(weights[k])) for k in range(K)
    )
    solution = solve_fusion(FusionProblem(surrogates=surrogates, lam=lam))
    estimates = [estimate_from_free(kind, u) for u in solution.per_task]
    return PipelineResult(
        kind=kind,
        estimates=estimates,
        center=solution.center,
        lambda_selected=lam,
        fusion=solution,
        initial_pooled=[init.pooled_theta for init in inits],
        initial_converged=[init.converged for init in inits],
        nuisance_selections=selections,
    )
