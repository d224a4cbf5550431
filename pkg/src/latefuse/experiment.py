"""Experiment runner: repeats x methods, error metrics, and result export.

Writes one row per (repeat, task, method) to results.csv, aggregated means
and maxima with standard errors to summary.csv, the full message audit to
audit.jsonl, an echo of the configuration to config.json, and (unless
disabled) comparison figures next to the delimited output.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ModelKind, ParamEstimate
from .errors import ConfigurationError
from .federation import run_pipeline
from .pipeline import PipelineConfig, PipelineResult
from .scenarios import ScenarioConfig, generate_scenario, repeat_seed


@dataclass(frozen=True)
class MetricsRecord:
    """Squared parameter errors for one (repeat, method) cell."""

    repeat: int
    method: str
    task_errors: np.ndarray
    avg_mse: float
    max_mse: float

    def __post_init__(self):
        errs = np.asarray(self.task_errors, dtype=float)
        if np.any(errs < 0) or not np.all(np.isfinite(errs)):
            raise ConfigurationError("squared errors must be finite and nonnegative")
        object.__setattr__(self, "task_errors", errs)


def squared_error(estimate: ParamEstimate, truth: np.ndarray) -> float:
    """Squared L2 error on the free coordinates."""
    truth = np.asarray(truth, dtype=float)
    if estimate.kind is ModelKind.PLM:
        free_truth = truth
    else:
        free_truth = truth[1:]
    diff = estimate.free - free_truth
    if diff.shape != free_truth.shape:
        raise ConfigurationError("estimate and truth dimensions differ")
    return float(diff @ diff)


def evaluate(
    estimates: list[ParamEstimate], truths: list[np.ndarray], repeat: int = 0, method: str = ""
) -> MetricsRecord:
    if len(estimates) != len(truths):
        raise ConfigurationError("estimate and truth task counts differ")
    errs = np.array([squared_error(e, t) for e, t in zip(estimates, truths)])
    return MetricsRecord(
        repeat=repeat,
        method=method,
        task_errors=errs,
        avg_mse=float(errs.mean()),
        max_mse=float(errs.max()),
    )


def method_pipeline_config(
    cfg: ScenarioConfig, method: str, repeat_index: int, overrides: dict | None = None
) -> PipelineConfig:
    """Translate a harness method name into pipeline settings."""
    base = {
        "kind": cfg.kind,
        "folds": cfg.folds,
        "seed": repeat_seed(cfg.seed, repeat_index),
    }
    if method == "itl":
        base["lambda_grid"] = (0.0,)
    elif method == "mtl":
        base["lambda_grid"] = None
    elif method == "mtl-nuis":
        base["lambda_grid"] = None
        base["nuisance_fusion"] = True
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    if overrides:
        base.update(overrides)
    return PipelineConfig(**base)


@dataclass
class ExperimentResult:
    config: ScenarioConfig
    metrics: list[MetricsRecord]
    rows: list[dict]
    summary: list[dict]
    out_dir: Path | None
    results: dict[tuple[int, str], PipelineResult]


def summarize(metrics: list[MetricsRecord]) -> list[dict]:
    methods = []
    for rec in metrics:
        if rec.method not in methods:
            methods.append(rec.method)
    out = []
    for method in methods:
        avg = np.array([r.avg_mse for r in metrics if r.method == method])
        mx = np.array([r.max_mse for r in metrics if r.method == method])
        reps = avg.size
        se = lambda v: float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
        out.append(
            {
                "method": method,
                "repeats": reps,
                "mean_avg_mse": float(avg.mean()),
                "se_avg_mse": se(avg),
                "mean_max_mse": float(mx.mean()),
                "se_max_mse": se(mx),
            }
        )
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def run_experiment(
    cfg: ScenarioConfig,
    out_dir=None,
    pipeline_overrides: dict | None = None,
    keep_results: bool = False,
    render_figures: bool = True,
) -> ExperimentResult:
    """Run repeats x methods through the federation, collect metrics, and
    export the delimited outputs (plus figures) when ``out_dir`` is given."""
    out_path = Path(out_dir) if out_dir is not None else None
    audit_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        audit_fh = open(out_path / "audit.jsonl", "w", encoding="utf-8", newline="\n")
    metrics: list[MetricsRecord] = []
    rows: list[dict] = []
    kept: dict[tuple[int, str], PipelineResult] = {}
    try:
        for r in range(cfg.repeats):
            draw = generate_scenario(cfg, r)
            for method in cfg.methods:
                pconf = method_pipeline_config(cfg, method, r, pipeline_overrides)
                result = run_pipeline(draw.datasets, pconf)
                record = evaluate(result.estimates, draw.true_thetas, repeat=r, method=method)
                metrics.append(record)
                if keep_results:
                    kept[(r, method)] = result
                for k, err in enumerate(record.task_errors):
                    rows.append(
                        {
                            "repeat": r,
                            "method": method,
                            "task": k + 1,
                            "sq_error": repr(float(err)),
                            "lambda": repr(float(result.lambda_selected)),
                            "initial_converged": all(result.initial_converged[k]),
                        }
                    )
                if audit_fh is not None and result.audit is not None:
                    for entry in result.audit.entries:
                        audit_fh.write(
                            json.dumps(
                                {
                                    "repeat": r,
                                    "method": method,
                                    "seq": entry.seq,
                                    "direction": entry.direction,
                                    "round": entry.round,
                                    "kind": entry.kind,
                                    "node": entry.node,
                                    "dims": {
                                        k: (list(v) if isinstance(v, tuple) else v)
                                        for k, v in entry.dims.items()
                                    },
                                    "bytes": entry.nbytes,
                                },
                                sort_keys=True,
                            )
                            + "\n"
                        )
    finally:
        if audit_fh is not None:
            audit_fh.close()
    summary = summarize(metrics)
    if out_path is not None:
        _write_csv(out_path / "results.csv", rows)
        _write_csv(out_path / "summary.csv", summary)
        with open(out_path / "config.json", "w", encoding="utf-8") as fh:
            echo = dataclasses.asdict(cfg)
            echo["methods"] = list(cfg.methods)
            if pipeline_overrides:
                echo["pipeline_overrides"] = {
                    k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in pipeline_overrides.items()
                }
            json.dump(echo, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if render_figures:
            from .report import render_run_figures

            render_run_figures(out_path)
    return ExperimentResult(
        config=cfg, metrics=metrics, rows=rows, summary=summary, out_dir=out_path, results=kept
    )
