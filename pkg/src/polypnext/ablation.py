"""Frame-count ablation: cross-validate one model per window length."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from .data import ClipRecord
from .model import ModelConfig
from .objective import METRIC_NAMES
from .plotting import plot_ablation
from .training import TrainConfig, run_cv


def ablate_frames(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    records: Sequence[ClipRecord],
    F_values: Sequence[int],
    out_dir,
) -> list[dict]:
    """Run cross-validation for each ``F`` and tabulate min/mean/max over folds.

    Writes ``ablation.csv`` and the four-panel ``ablation.png`` to ``out_dir``.
    """
    F_values = [int(f) for f in F_values]
    if not F_values:
        raise ValueError("F_values must not be empty")
    if any(f < 1 for f in F_values):
        raise ValueError(f"window lengths must be >= 1, got {F_values}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for F in F_values:
        summary = run_cv(records, model_cfg.replace(frames=F), train_cfg, out_dir / f"F{F}")
        for metric in METRIC_NAMES:
            rows.append({"F": F, "metric": metric, **summary.stats[metric]})
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("F", "metric", "min", "mean", "max"))
        for r in rows:
            w.writerow((r["F"], r["metric"], repr(r["min"]), repr(r["mean"]), repr(r["max"])))
    plot_ablation(rows, out_dir / "ablation.png")
    return rows
