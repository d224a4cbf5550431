"""Command-line interface: simulate, fit real datasets, render reports.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .data import ModelKind, read_dataset_csv
from .errors import ConfigurationError, DataFormatError, FederationViolation
from .experiment import run_experiment
from .federation import run_pipeline
from .pipeline import PipelineConfig
from .report import render_run_figures, render_sweep_figure
from .scenarios import ScenarioConfig


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip() != "")
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latefuse",
        description="Late-fusion multi-task estimation for semiparametric models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run a simulation scenario")
    sim.add_argument("--scenario", type=int, required=True, choices=(1, 2, 3))
    sim.add_argument("--n", type=int, default=100, help="per-task sample size")
    sim.add_argument("--eta", type=float, default=1.0, help="similarity knob in [0, 1]")
    sim.add_argument("--repeats", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument(
        "--methods", default="itl,mtl", help="comma-separated subset of itl,mtl,mtl-nuis"
    )
    sim.add_argument("--folds", type=int, default=5)
    sim.add_argument("--tasks", type=int, default=5, help="number of tasks K")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--lambda-grid", default=None, help="override penalty grid (comma list)")
    sim.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    fit = sub.add_parser("fit", help="fit task datasets from CSV files")
    fit.add_argument("--model", required=True, choices=("plm", "sim", "cate-sim"))
    fit.add_argument("--data", required=True, help="comma-separated task CSV paths")
    fit.add_argument("--lambda-grid", default=None, help="penalty grid (comma list)")
    fit.add_argument("--folds", type=int, default=5)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--nuisance-fusion", action="store_true")
    fit.add_argument(
        "--domain",
        default="-1:1",
        help="covariate domain box as lo:hi (used by nuisance fusion grids)",
    )
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--no-figures", action="store_true")

    rep = sub.add_parser("report", help="render figures from run directories")
    rep.add_argument("--runs", nargs="+", required=True, help="run directories")
    rep.add_argument("--out", default=None, help="combined-figure output path (PNG)")
    return parser


def _cmd_sim(args) -> int:
    cfg = ScenarioConfig(
        scenario=args.scenario,
        n=args.n,
        K=args.tasks,
        eta=args.eta,
        repeats=args.repeats,
        seed=args.seed,
        methods=tuple(args.methods.split(",")),
        folds=args.folds,
    )
    overrides = {}
    if args.lambda_grid is not None:
        overrides["lambda_grid"] = _parse_floats(args.lambda_grid)
    run_experiment(
        cfg,
        out_dir=args.out,
        pipeline_overrides=overrides or None,
        render_figures=not args.no_figures,
    )
    print(f"wrote results to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    paths = [p for p in args.data.split(",") if p.strip()]
    if not paths:
        raise ConfigurationError("no dataset paths given")
    datasets = [read_dataset_csv(path, task_id=k) for k, path in enumerate(paths)]
    try:
        lo_text, hi_text = args.domain.split(":")
        lo, hi = float(lo_text), float(hi_text)
    except ValueError:
        raise ConfigurationError(f"expected --domain lo:hi, got {args.domain!r}") from None
    config = PipelineConfig(
        kind=ModelKind.parse(args.model),
        folds=args.folds,
        seed=args.seed,
        lambda_grid=_parse_floats(args.lambda_grid) if args.lambda_grid else None,
        nuisance_fusion=args.nuisance_fusion,
        domain_lo=lo,
        domain_hi=hi,
    )
    result = run_pipeline(datasets, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for k, est in enumerate(result.estimates):
        for c, value in enumerate(est.theta):
            rows.append({"task": k + 1, "coord": c + 1, "estimate": repr(float(value))})
    with open(out / "results.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=["task", "coord", "estimate"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    summary = []
    for k in range(len(datasets)):
        summary.append(
            {
                "task": k + 1,
                "lambda": repr(float(result.lambda_selected)),
                "fused_to_center": bool(result.fusion.active[k]),
                "initial_converged": all(result.initial_converged[k]),
            }
        )
    with open(out / "summary.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary)

    with open(out / "audit.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.audit.to_jsonl())
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        echo = dataclasses.asdict(config)
        echo["kind"] = config.kind.value
        echo["bandwidth"] = dataclasses.asdict(config.bandwidth)
        echo["data"] = paths
        json.dump(echo, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    if not args.no_figures:
        render_run_figures(out)
    print(f"wrote estimates to {out}")
    return 0


def _cmd_report(args) -> int:
    rendered = []
    for run in args.runs:
        rendered.extend(render_run_figures(run))
    if args.out is not None:
        combined = render_sweep_figure(args.runs, args.out)
        if combined is not None:
            rendered.append(combined)
    if not rendered:
        raise ConfigurationError("no renderable outputs found in the given run directories")
    for path in rendered:
        print(path)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "sim":
            return _cmd_sim(args)
        if args.command == "fit":
            return _cmd_fit(args)
        return _cmd_report(args)
    except (ConfigurationError, DataFormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, FederationViolation) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
