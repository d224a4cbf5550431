"""Synthetic multi-task data generators for the three benchmark scenarios.

All scenarios draw 8 covariates uniform on [-1, 1] and build five tasks:
four similar ones plus an outlier whose parameters drift away as the
similarity knob eta drops from 1 to 0. Randomness is drawn up front and
independently of eta, so two draws at nearby eta with the same seed differ
only through the (1 - eta) factors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import ModelKind, SimilarityConfig, TaskDataset, pin_first_coordinate
from .errors import ConfigurationError

SCENARIO_KINDS = {1: ModelKind.CATE_SIM, 2: ModelKind.SIM, 3: ModelKind.PLM}

METHOD_NAMES = ("itl", "mtl", "mtl-nuis")

THETA0_CATE = np.array([-1.0, 1.0, 0.5, 0.5, -0.5, -0.5, 0.0, 0.0])
THETA0_SIM = np.array([2.0, -2.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class ScenarioConfig:
    """One experiment's settings: scenario id, sizes, similarity, methods."""

    scenario: int
    n: int = 100
    K: int = 5
    eta: float = 1.0
    repeats: int = 1
    seed: int = 0
    methods: tuple[str, ...] = ("itl", "mtl")
    p: int = 8
    folds: int = 5

    def __post_init__(self):
        if self.scenario not in SCENARIO_KINDS:
            raise ConfigurationError(f"unknown scenario id {self.scenario}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError("eta must lie in [0, 1]")
        if self.n < 40:
            raise ConfigurationError("per-task sample size must be at least 40")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be at least 1")
        if self.K < 1:
            raise ConfigurationError("need at least one task")
        methods = tuple(m.lower().replace("_", "-") for m in self.methods)
        bad = [m for m in methods if m not in METHOD_NAMES]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; choose from {METHOD_NAMES}")
        object.__setattr__(self, "methods", methods)
        if self.scenario in (1, 2) and self.p != 8:
            raise ConfigurationError("scenarios 1 and 2 are defined for p = 8")
        if self.scenario == 3 and self.p < 4:
            raise ConfigurationError("scenario 3 needs at least 4 covariates")

    @property
    def kind(self) -> ModelKind:
        return SCENARIO_KINDS[self.scenario]


@dataclass(frozen=True)
class ScenarioDraw:
    kind: ModelKind
    datasets: list[TaskDataset]
    true_thetas: list[np.ndarray]
    similarity: SimilarityConfig


def repeat_seed(base_seed: int, repeat_index: int) -> int:
    return base_seed * 10**6 + repeat_index


def plm_main_effect(X: np.ndarray) -> np.ndarray:
    s = X.sum(axis=1)
    return 0.5 * s**2 + s**3


def plm_exposure_mean(X: np.ndarray, k: int, G_k: float, eta: float) -> np.ndarray:
    base = 0.25 * (X[:, 0] ** 2 + X[:, 1] ** 2)
    if k >= 3:
        base = base + G_k * (1.0 - eta) * (X[:, 2] ** 2 + X[:, 3] ** 2 - 2.0)
    return base


def _generate_plm(cfg: ScenarioConfig, rng: np.random.Generator) -> ScenarioDraw:
    K, n, p, eta = cfg.K, cfg.n, cfg.p, cfg.eta
    G = rng.standard_normal(K)
    datasets, truths = [], []
    for k in range(K):
        X = rng.uniform(-1.0, 1.0, (n, p))
        noise_t = rng.normal(0.0, 0.5, n)
        noise_y = rng.standard_normal(n)
        theta = 2.0 + 0.1 * (G[k] + 1.0) * (1.0 - eta)
        if K > 1 and k == K - 1:
            theta += 0.1 * (1.0 - eta)
        g = plm_exposure_mean(X, k, G[k], eta)
        T = g + noise_t
        Y = T * theta + plm_main_effect(X) + noise_y
        datasets.append(TaskDataset(task_id=k, X=X, Y=Y, T=T))
        truths.append(np.array([theta]))
    core = [float(t[0]) for t in truths[: max(K - 1, 1)]]
    similarity = SimilarityConfig(
        eps_task=(1.0 / K if K > 1 and eta < 1.0 else 0.0),
        delta_task=float(max(abs(t - 2.0) for t in core)),
        eps_nuis=(min(2, K - 3 if K > 3 else 0) / K if eta < 1.0 else 0.0),
        delta_nuis=0.0,
    )
    return ScenarioDraw(ModelKind.PLM, datasets, truths, similarity)


def _generate_sim(cfg: ScenarioConfig, rng: np.random.Generator) -> ScenarioDraw:
    K, n, p, eta = cfg.K, cfg.n, cfg.p, cfg.eta
    b = rng.standard_normal((K, p))
    datasets, truths = [], []
    raw_thetas = []
    for k in range(K):
        X = rng.uniform(-1.0, 1.0, (n, p))
        noise = rng.normal(0.0, 0.2, n)
        theta = THETA0_SIM + 0.05 * b[k]
        if K > 1 and k == K - 1:
            theta = theta + (1.0 - eta)
        s = X @ theta
        Y = 0.2 * s**2 + noise
        datasets.append(TaskDataset(task_id=k, X=X, Y=Y))
        raw_thetas.append(theta)
        truths.append(pin_first_coordinate(theta))
    core = raw_thetas[: max(K - 1, 1)]
    similarity = SimilarityConfig(
        eps_task=(1.0 / K if K > 1 and eta < 1.0 else 0.0),
        delta_task=float(max(np.linalg.norm(t - THETA0_SIM) for t in core)),
        eps_nuis=0.0,
        delta_nuis=0.0,
    )
    return ScenarioDraw(ModelKind.SIM, datasets, truths, similarity)


def cate_propensity(X: np.ndarray, k: int) -> np.ndarray:
    if k <= 2:
        return X[:, 0]
    return X[:, 0] + 0.5 * X[:, 1] ** 2


def _generate_cate(cfg: ScenarioConfig, rng: np.random.Generator) -> ScenarioDraw:
    K, n, p, eta = cfg.K, cfg.n, cfg.p, cfg.eta
    b = rng.standard_normal((K, p))
    datasets, truths = [], []
    raw_thetas = []
    for k in range(K):
        X = rng.uniform(-1.0, 1.0, (n, p))
        u_t = rng.uniform(size=n)
        u_y = rng.uniform(size=n)
        theta = THETA0_CATE + 0.01 * b[k]
        if K > 1 and k == K - 1:
            theta = theta + 0.5 * (1.0 - eta)
        p_treat = expit(4.0 * cate_propensity(X, k) - 1.0)
        T = np.where(u_t < p_treat, 1.0, -1.0)
        s = X @ theta
        p_out = expit(T * s + 0.2 * (s + 1.0) ** 2)
        Y = (u_y < p_out).astype(float)
        datasets.append(TaskDataset(task_id=k, X=X, Y=Y, T=T))
        raw_thetas.append(theta)
        truths.append(pin_first_coordinate(theta))
    core = raw_thetas[: max(K - 1, 1)]
    similarity = SimilarityConfig(
        eps_task=(1.0 / K if K > 1 and eta < 1.0 else 0.0),
        delta_task=float(max(np.linalg.norm(t - THETA0_CATE) for t in core)),
        eps_nuis=(min(2, max(K - 3, 0)) / K),
        delta_nuis=0.0,
    )
    return ScenarioDraw(ModelKind.CATE_SIM, datasets, truths, similarity)


def generate_scenario(cfg: ScenarioConfig, repeat_index: int) -> ScenarioDraw:
    """Draw one repeat's task datasets and their estimand parameters
    (single-index truths are returned pinned, first coordinate 1)."""
    rng = np.random.default_rng(repeat_seed(cfg.seed, repeat_index))
    if cfg.scenario == 3:
        return _generate_plm(cfg, rng)
    if cfg.scenario == 2:
        return _generate_sim(cfg, rng)
    return _generate_cate(cfg, rng)
