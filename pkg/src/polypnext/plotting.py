"""Matplotlib figures written next to the tabular outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .objective import METRIC_NAMES  # noqa: E402

LABELS = {"dice": "Dice", "iou": "IOU", "hd95": "HD95 [px]", "recall": "Recall"}
LOWER_IS_BETTER = {"hd95"}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def best_index(values, metric: str) -> int:
    values = list(values)
    pick = min if metric in LOWER_IS_BETTER else max
    return values.index(pick(values))


def plot_ablation(rows, path, title: str | None = None) -> Path:
    """One panel per metric: mean over folds, shaded min-max band, black circle at the best F."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(3.0 * len(METRIC_NAMES), 2.8))
        for ax, metric in zip(axes, METRIC_NAMES):
            sel = sorted((r for r in rows if r["metric"] == metric), key=lambda r: r["F"])
            fs = [r["F"] for r in sel]
            mean = [r["mean"] for r in sel]
            ax.fill_between(fs, [r["min"] for r in sel], [r["max"] for r in sel], alpha=0.3, color="tab:blue", lw=0)
            ax.plot(fs, mean, "-", color="tab:blue", lw=1.2)
            i = best_index(mean, metric)
            ax.plot(fs[i], mean[i], "o", color="black", ms=6)
            ax.set_xlabel("frames per window")
            ax.set_title(LABELS[metric])
            ax.set_xticks(fs)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_loss_curve(losses, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.plot(range(1, len(losses) + 1), losses, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("Dice + BCE loss")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_latencies(latencies_s, path) -> Path:
    path = Path(path)
    ms = [1000.0 * t for t in latencies_s]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.hist(ms, bins=min(30, max(5, len(ms) // 3)), color="tab:gray")
        ax.axvline(sorted(ms)[len(ms) // 2], color="black", lw=1)
        ax.set_xlabel("window latency [ms]")
        ax.set_ylabel("trials")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
