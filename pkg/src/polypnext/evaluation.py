"""Test-split evaluation, attribute stratification, throughput and report files."""
from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ATTRIBUTE_CODES, ClipRecord, load_window, window_clip
from .objective import METRIC_NAMES, MetricFrame, binarize, frame_metrics, mean_frames

AGGREGATE_ROW = "__aggregate__"

REPORT_NOTES = {
    "averaging": "frames -> clip mean -> split mean (unweighted by clip length); frame-level mean also reported",
    "threshold": "sigmoid(logit) > 0.5",
    "hd95": "4-connected boundary pixels, Euclidean, pixels at model input resolution; "
            "one empty mask -> image diagonal, both empty -> 0",
    "windowing": "non-overlapping stride-F windows, tail padded by repeating the last frame; duplicates dropped",
}

# Reference numbers from the published SUN-SEG unseen evaluation (RTX 3090).
# Documentation only; desk-scale runs are not expected to reproduce them.
PUBLISHED_REFERENCE = {
    "easy_unseen": {"dice": 0.7686, "iou": 0.6958, "hd95": 15.91, "recall": 0.7350},
    "hard_unseen": {"dice": 0.7838, "iou": 0.7067, "hd95": 14.07, "recall": 0.7641},
    "params": "21.95M",
    "fps": 108,
}


class GroundTruthOracle:
    """Predicts the ground truth itself; gives the upper bound of every metric."""

    def predict(self, images, masks):
        return (masks * 2.0 - 1.0) * 20.0


class ConstantPredictor:
    """Predicts background everywhere (or foreground with ``value > 0``)."""

    def __init__(self, value: float = -20.0):
        self.value = value

    def predict(self, images, masks):
        return torch.full_like(masks, self.value)


def _predict(model, images, masks):
    if hasattr(model, "predict"):
        return model.predict(images, masks)
    with torch.no_grad():
        return model(images)


@dataclass
class MetricReport:
    split: str
    frames: int
    per_clip: dict[str, MetricFrame]
    aggregate: MetricFrame
    frame_aggregate: MetricFrame
    by_attribute: dict[str, float]
    clip_frames: dict[str, int] = field(default_factory=dict)
    clip_attributes: dict[str, list[str]] = field(default_factory=dict)
    params: dict[str, int] = field(default_factory=dict)
    fps: dict = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=lambda: dict(REPORT_NOTES))

    @property
    def n_frames_evaluated(self) -> int:
        return sum(self.clip_frames.values())

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "frames": self.frames,
            "notes": self.notes,
            "aggregate": self.aggregate.as_dict(),
            "frame_aggregate": self.frame_aggregate.as_dict(),
            "by_attribute": {k: self.by_attribute[k] for k in ATTRIBUTE_CODES if k in self.by_attribute},
            "per_clip": {k: self.per_clip[k].as_dict() for k in sorted(self.per_clip)},
            "clip_frames": {k: self.clip_frames[k] for k in sorted(self.clip_frames)},
            "clip_attributes": {k: self.clip_attributes[k] for k in sorted(self.clip_attributes)},
            "params": self.params,
            "fps": self.fps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            split=d["split"],
            frames=d["frames"],
            per_clip={k: MetricFrame(**v) for k, v in d["per_clip"].items()},
            aggregate=MetricFrame(**d["aggregate"]),
            frame_aggregate=MetricFrame(**d["frame_aggregate"]),
            by_attribute=dict(d["by_attribute"]),
            clip_frames=dict(d.get("clip_frames", {})),
            clip_attributes={k: list(v) for k, v in d.get("clip_attributes", {}).items()},
            params=dict(d.get("params", {})),
            fps=dict(d.get("fps", {})),
            notes=dict(d.get("notes", {})),
        )


def predict_clip(model, record: ClipRecord, frames: int, size, batch_size: int = 4):
    """Yield ``(frame_index, logits HxW, gt HxW)`` once per clip frame, in order."""
    windows = window_clip(record, frames, "eval_stride_F")
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        loaded = [load_window(record, w, size) for w in chunk]
        images = torch.cat([im for im, _ in loaded])
        masks = torch.cat([m for _, m in loaded])
        logits = _predict(model, images, masks)
        for b, w in enumerate(chunk):
            for pos in w.unique_positions():
                yield w.frame_indices[pos], logits[b, pos, 0], masks[b, pos, 0]


def _model_size(model, records: Sequence[ClipRecord]):
    config = getattr(model, "config", None)
    if config is not None:
        return config.input_size
    from PIL import Image

    with Image.open(records[0].mask_paths[0]) as im:
        return im.size[1], im.size[0]


def evaluate_split(model, records: Sequence[ClipRecord], frames: int, size=None, batch_size: int = 4, split=None) -> MetricReport:
    """Evaluate a model (or oracle predictor) on a list of clips.

    Frame metrics are averaged to a clip mean, then clip means to the split
    mean.  Padding duplicates are never scored.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot evaluate an empty split")
    if isinstance(model, torch.nn.Module):
        model.eval()
    size = tuple(size) if size is not None else _model_size(model, records)
    per_clip, clip_frames, all_frames = {}, {}, []
    for rec in sorted(records, key=lambda r: r.clip_id):
        metrics = []
        for idx, logits, gt in predict_clip(model, rec, frames, size, batch_size):
            metrics.append(frame_metrics(binarize(logits), gt.numpy() > 0.5))
        per_clip[rec.clip_id] = mean_frames(metrics)
        clip_frames[rec.clip_id] = len(metrics)
        all_frames.extend(metrics)
    by_attribute = {}
    for code in ATTRIBUTE_CODES:
        vals = [per_clip[r.clip_id].dice for r in records if code in r.attributes]
        if vals:
            by_attribute[code] = float(np.mean(vals))
    params = {}
    if hasattr(model, "encoder"):
        from .model import count_parameters

        params = count_parameters(model)
    return MetricReport(
        split=split or records[0].split,
        frames=frames,
        per_clip=per_clip,
        aggregate=mean_frames(per_clip[k] for k in sorted(per_clip)),
        frame_aggregate=mean_frames(all_frames),
        by_attribute=by_attribute,
        clip_frames=clip_frames,
        clip_attributes={r.clip_id: sorted(r.attributes) for r in records},
        params=params,
    )


# --------------------------------------------------------------------------
# throughput


def hardware_descriptor() -> str:
    parts = [platform.machine(), platform.processor() or "unknown-cpu", f"torch {torch.__version__}",
             f"threads={torch.get_num_threads()}"]
    if torch.cuda.is_available():
        parts.append(torch.cuda.get_device_name(0))
    return "; ".join(parts)


def benchmark_fps(model, trials: int = 50, warmup: int = 5, frames: int = 5, size=None) -> dict:
    """Time forward passes on a ``1 x F x 3 x H x W`` window.

    FPS is ``F / median latency``; the IQR is taken over per-trial FPS.
    """
    if trials < 10:
        raise ValueError("trials must be >= 10")
    if warmup < 3:
        raise ValueError("warmup must be >= 3")
    size = tuple(size) if size is not None else model.config.input_size
    model.eval()
    x = torch.rand(1, frames, 3, *size, generator=torch.Generator().manual_seed(0))
    latencies = []
    with torch.no_grad():
        for i in range(warmup + trials):
            t0 = time.perf_counter()
            model(x)
            if torch.cuda.is_available():
                torch.cuda.synchronize()
            if i >= warmup:
                latencies.append(time.perf_counter() - t0)
    lat = np.asarray(latencies)
    fps = frames / lat
    q1, q3 = np.percentile(fps, [25, 75])
    return {
        "fps_median": float(frames / np.median(lat)),
        "fps_mean": float(frames / lat.mean()),
        "fps_iqr": float(q3 - q1),
        "fps_q1": float(q1),
        "fps_q3": float(q3),
        "latency_median_s": float(np.median(lat)),
        "frames_per_window": frames,
        "input_size": list(size),
        "trials": trials,
        "warmup": warmup,
        "hardware": hardware_descriptor(),
        "latencies_s": lat.tolist(),
    }


# --------------------------------------------------------------------------
# report files


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def report_markdown(report: MetricReport) -> str:
    lines = [f"# Evaluation: {report.split} (F={report.frames})", ""]
    for k in sorted(report.notes):
        lines.append(f"- {k}: {report.notes[k]}")
    lines += ["", "## Overall", ""]
    head = ["Split", "Dice", "IOU", "HD95", "Recall"]
    row = [report.split] + [_fmt(getattr(report.aggregate, m)) for m in METRIC_NAMES]
    if report.params:
        head.append("Params")
        row.append(f"{report.params['total'] / 1e6:.2f}M")
    if report.fps:
        head.append("FPS")
        row.append(f"{report.fps['fps_median']:.1f}")
    lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(row) + " |"]
    frame_row = ["frame-level"] + [_fmt(getattr(report.frame_aggregate, m)) for m in METRIC_NAMES]
    lines.append("| " + " | ".join(frame_row + [""] * (len(head) - len(frame_row))) + " |")

    codes = [c for c in ATTRIBUTE_CODES if c in report.by_attribute]
    if codes:
        lines += ["", "## Dice by visual attribute", ""]
        lines.append("| Split | " + " | ".join(codes) + " |")
        lines.append("|" + "---|" * (len(codes) + 1))
        lines.append(f"| {report.split} | " + " | ".join(_fmt(report.by_attribute[c]) for c in codes) + " |")

    lines += ["", "## Per clip", "", "| Clip | Frames | Dice | IOU | HD95 | Recall |", "|---|---|---|---|---|---|"]
    for cid in sorted(report.per_clip):
        m = report.per_clip[cid]
        lines.append(f"| {cid} | {report.clip_frames.get(cid, '')} | " + " | ".join(_fmt(getattr(m, k)) for k in METRIC_NAMES) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricReport, out_dir, formats=("csv", "json", "markdown"), stem: str = "metrics") -> dict[str, Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from None
    written = {}
    for fmt in formats:
        if fmt == "csv":
            path = out_dir / f"{stem}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("clip_id", "n_frames", *METRIC_NAMES))
                for cid in sorted(report.per_clip):
                    m = report.per_clip[cid]
                    w.writerow((cid, report.clip_frames.get(cid, ""), *(repr(getattr(m, k)) for k in METRIC_NAMES)))
                w.writerow((AGGREGATE_ROW, report.n_frames_evaluated, *(repr(getattr(report.aggregate, k)) for k in METRIC_NAMES)))
        elif fmt == "json":
            path = out_dir / f"{stem}.json"
            path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        elif fmt == "markdown":
            path = out_dir / f"{stem}.md"
            path.write_text(report_markdown(report))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written[fmt] = path
    return written


def load_report(path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))
