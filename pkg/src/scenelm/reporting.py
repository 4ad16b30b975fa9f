"""Run reports: metrics summary plus loss-curve and ablation plots."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .trainer import LOSS_NAMES, read_loss_log


class ReportError(RuntimeError):
    pass


def _plot_loss_curves(log, path: Path):
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in LOSS_NAMES:
        steps = [r.step for r in log if r.values.get(name) is not None]
        vals = [r.values[name] for r in log if r.values.get(name) is not None]
        if steps:
            ax.plot(steps, vals, label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_ablation_bars(rows: List[dict], path: Path):
    metrics = [k[:-5] for k in rows[0] if k.endswith("_mean")]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        names = [r["arm"] for r in rows]
        means = [r.get(f"{metric}_mean", 0.0) for r in rows]
        stds = [r.get(f"{metric}_std", 0.0) for r in rows]
        ax.bar(names, means, yerr=stds, capsize=3)
        ax.set_title(metric, fontsize=9)
        ax.tick_params(axis="x", rotation=45, labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def report(run_dir) -> List[Path]:
    """Render report.txt and plots for a run directory; idempotent.

    Requires loss_log.jsonl; folds in metrics.json and ablation.json when
    present. Returns the list of files written.
    """
    run_dir = Path(run_dir)
    log_path = run_dir / "loss_log.jsonl"
    if not log_path.exists():
        raise ReportError(f"missing loss log {log_path}")
    log = read_loss_log(log_path)
    written = []

    lines = [f"run: {run_dir.name}", f"steps: {len(log)}"]
    for name in LOSS_NAMES:
        vals = [r.values[name] for r in log if r.values.get(name) is not None]
        if vals:
            lines.append(f"{name}: first {vals[0]:.6f} last {vals[-1]:.6f} "
                         f"applied at {len(vals)}/{len(log)} steps")
        else:
            lines.append(f"{name}: never applied")

    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text())["metrics"]
        lines.append("metrics:")
        for k in sorted(metrics):
            lines.append(f"  {k}: {metrics[k]:.6f}")

    report_path = run_dir / "report.txt"
    report_path.write_text("\n".join(lines) + "\n")
    written.append(report_path)

    curves = run_dir / "loss_curves.png"
    _plot_loss_curves(log, curves)
    written.append(curves)

    ablation_path = run_dir / "ablation.json"
    if ablation_path.exists():
        bars = run_dir / "ablation_bars.png"
        _plot_ablation_bars(json.loads(ablation_path.read_text()), bars)
        written.append(bars)
    return written
