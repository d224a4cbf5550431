"""Figure rendering for run directories.

Reads the delimited outputs back in and writes PNGs next to them, so the
report path works on any results directory regardless of how it was
produced.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _method_order(rows: list[dict]) -> list[str]:
    order = []
    for row in rows:
        if row["method"] not in order:
            order.append(row["method"])
    return order


def render_run_figures(run_dir) -> list[Path]:
    """Render the standard figures for one run directory into figs/."""
    run_dir = Path(run_dir)
    results = run_dir / "results.csv"
    if not results.exists():
        return []
    rows = _read_csv(results)
    if not rows:
        return []
    figs_dir = run_dir / "figs"
    figs_dir.mkdir(exist_ok=True)
    if "sq_error" in rows[0]:
        return _render_metric_figures(rows, figs_dir)
    if "estimate" in rows[0]:
        return _render_estimate_figure(rows, figs_dir)
    return []


def _render_metric_figures(rows: list[dict], figs_dir: Path) -> list[Path]:
    methods = _method_order(rows)
    written = []

    # Averaged MSE per repeat, by method.
    per_repeat: dict[str, dict[int, list[float]]] = {m: {} for m in methods}
    for row in rows:
        per_repeat[row["method"]].setdefault(int(row["repeat"]), []).append(
            float(row["sq_error"])
        )
    avg_by_method = {
        m: [sum(v) / len(v) for _, v in sorted(reps.items())] for m, reps in per_repeat.items()
    }
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([avg_by_method[m] for m in methods], tick_labels=methods, showmeans=True)
    ax.set_ylabel("averaged MSE over tasks")
    ax.set_title("Averaged MSE by method")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = figs_dir / "avg_mse_by_method.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    # Mean MSE per task, by method.
    tasks = sorted({int(r["task"]) for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(methods), 1)
    for i, m in enumerate(methods):
        means = []
        for t in tasks:
            vals = [float(r["sq_error"]) for r in rows if r["method"] == m and int(r["task"]) == t]
            means.append(sum(vals) / len(vals))
        ax.bar([t + (i - (len(methods) - 1) / 2) * width for t in tasks], means, width, label=m)
    ax.set_xticks(tasks)
    ax.set_xlabel("task")
    ax.set_ylabel("mean MSE")
    ax.set_title("Per-task mean MSE")
    ax.legend()
    ax.grid(True, alpha=0.3, axis="y")
    fig.tight_layout()
    path = figs_dir / "task_mse.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)
    return written


def _render_estimate_figure(rows: list[dict], figs_dir: Path) -> list[Path]:
    tasks = sorted({int(r["task"]) for r in rows})
    coords = sorted({int(r["coord"]) for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for t in tasks:
        vals = [
            float(r["estimate"]) for c in coords for r in rows
            if int(r["task"]) == t and int(r["coord"]) == c
        ]
        ax.plot(coords, vals, marker="o", label=f"task {t}")
    ax.set_xlabel("coordinate")
    ax.set_ylabel("estimate")
    ax.set_title("Fused per-task estimates")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = figs_dir / "estimates.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def render_sweep_figure(run_dirs, out_path) -> Path | None:
    """Combine several runs (e.g. an eta sweep) into one comparison figure:
    mean averaged MSE against the swept eta value, one line per method."""
    points = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        cfg_path = run_dir / "config.json"
        sum_path = run_dir / "summary.csv"
        if not (cfg_path.exists() and sum_path.exists()):
            continue
        with open(cfg_path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
        for row in _read_csv(sum_path):
            points.append(
                {
                    "eta": float(cfg.get("eta", 0.0)),
                    "method": row["method"],
                    "mean_avg_mse": float(row["mean_avg_mse"]),
                    "se_avg_mse": float(row["se_avg_mse"]),
                }
            )
    if not points:
        return None
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    methods = []
    for pt in points:
        if pt["method"] not in methods:
            methods.append(pt["method"])
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for m in methods:
        pts = sorted((p for p in points if p["method"] == m), key=lambda p: p["eta"])
        xs = [p["eta"] for p in pts]
        ys = [p["mean_avg_mse"] for p in pts]
        es = [p["se_avg_mse"] for p in pts]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=m)
    ax.set_xlabel("eta (task similarity)")
    ax.set_ylabel("mean averaged MSE")
    ax.set_title("Averaged MSE across similarity levels")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
