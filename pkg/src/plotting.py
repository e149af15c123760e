"""
Figures for finished runs: second-step loss curves, threshold trajectory, accuracy per
epoch and the lambda/m sensitivity sweep.
"""

import json
import logging
import os
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from src.errors import ConfigurationError, MissingMetricError
from src.metrics_store import read_metric_series

logger = logging.getLogger(__name__)

PLOT_KINDS = ("losses", "threshold", "accuracy", "sensitivity")
SENSITIVITY_FILE = "sensitivity.json"


def _plot_series(ax, series, label: str):
    steps, values = zip(*series)
    ax.plot(steps, values, label=label)


def _losses(run_dir: str, ax):
    _plot_series(ax, read_metric_series(run_dir, "loss_trn", "step2"), "L_trn")
    try:
        _plot_series(ax, read_metric_series(run_dir, "loss_val", "step2"), "L_val (sum log sigma)")
    except MissingMetricError:
        logger.info("[PLOT] %s has no L_val series (no stochastic head)", run_dir)
    ax.set_xlabel("second-step iteration")
    ax.set_ylabel("loss")


def _threshold(run_dir: str, ax):
    _plot_series(ax, read_metric_series(run_dir, "tau", "step2"), "tau")
    _plot_series(ax, read_metric_series(run_dir, "masked_fraction", "step2"), "fraction kept")
    ax.set_xlabel("second-step iteration")
    ax.set_ylim(0.0, 1.05)


def _accuracy(run_dir: str, ax):
    found = False
    for stage in ("step1", "step2"):
        try:
            _plot_series(ax, read_metric_series(run_dir, "target_accuracy", stage), f"{stage} target accuracy")
            found = True
        except MissingMetricError:
            continue
    if not found:
        raise MissingMetricError(f"metric 'target_accuracy' not found in {run_dir}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("accuracy")


def _sensitivity(run_dir: str, ax):
    path = os.path.join(run_dir, SENSITIVITY_FILE)
    if not os.path.exists(path):
        raise MissingMetricError(f"{run_dir} has no {SENSITIVITY_FILE}")
    with open(path, 'r', encoding='utf-8') as f:
        report = json.load(f)
    rows = report.get("rows") or []
    if not rows:
        raise MissingMetricError(f"{path} has no rows")
    values = [r["value"] for r in rows]
    ax.errorbar(values, [r["mean_accuracy"] for r in rows], yerr=[r["std_accuracy"] for r in rows],
                marker="o", capsize=3, label=report.get("parameter"))
    ax.set_xscale("log")
    ax.set_xlabel(report.get("parameter", "value"))
    ax.set_ylabel("target accuracy")


_PLOTTERS = {"losses": _losses, "threshold": _threshold, "accuracy": _accuracy, "sensitivity": _sensitivity}


def plot_curves(run_dir: str, which: str, output_path: Optional[str] = None) -> str:
    """Render one figure of a run directory to PNG and return its path"""
    if which not in _PLOTTERS:
        raise ConfigurationError(f"unknown plot '{which}', expected one of {PLOT_KINDS}")
    if not os.path.isdir(run_dir):
        raise MissingMetricError(f"run directory {run_dir} does not exist")

    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        _PLOTTERS[which](run_dir, ax)
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        output_path = output_path or os.path.join(run_dir, f"{which}.png")
        fig.savefig(output_path, dpi=120)
    finally:
        plt.close(fig)
    logger.info("[PLOT] Saved %s", output_path)
    return output_path


def plot_all(run_dir: str) -> List[str]:
    """Every figure the run has data for"""
    paths = []
    for which in PLOT_KINDS:
        try:
            paths.append(plot_curves(run_dir, which))
        except MissingMetricError as e:
            logger.debug("[PLOT] Skipping %s: %s", which, e)
    return paths
