"""Cross-validated training with named, independent random streams."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import yaml

from .augment import AugmentPolicy, augment_window
from .data import ClipRecord, FrameWindow, load_window, window_clip
from .model import ModelConfig, PolypNextLSTM, save_checkpoint
from .objective import METRIC_NAMES, MetricFrame, dice_bce_loss

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 100
    batch_size: int = 8
    folds: int = 5
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    augment_enabled: bool = True
    max_steps: int | None = None
    lr_schedule: str = "constant"
    grad_clip: float | None = None
    eval_batch_size: int = 4
    cache_mb: int = 512
    # Per-stream seed overrides, e.g. {"augment": 3}; unset streams derive from `seed`.
    stream_seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        unknown = set(self.stream_seeds) - set(STREAMS)
        if unknown:
            raise ConfigError(f"unknown random stream(s) {sorted(unknown)}; streams are {list(STREAMS)}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["augment"]["crop_scale"] = list(self.augment.crop_scale)
        return d


STREAMS = ("init", "shuffle", "augment", "folds")


def stream_seed(cfg: TrainConfig, name: str) -> int:
    if name not in STREAMS:
        raise KeyError(name)
    if name in cfg.stream_seeds:
        return int(cfg.stream_seeds[name])
    return int(np.random.SeedSequence([cfg.seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def stream(cfg: TrainConfig, name: str, fold: int = 0) -> np.random.Generator:
    return np.random.default_rng([stream_seed(cfg, name), fold])


# --------------------------------------------------------------------------
# config file: YAML with `model`, `train` and `augment` sections


def _build_section(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"invalid config key '{section}.{key}'")
    return values


def config_from_dict(raw: dict) -> tuple[ModelConfig, TrainConfig]:
    raw = dict(raw or {})
    for key in raw:
        if key not in ("model", "train", "augment"):
            raise ConfigError(f"invalid config key '{key}'")
    try:
        model_cfg = ModelConfig.from_dict(raw.get("model") or {})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    aug = _build_section(AugmentPolicy, dict(raw.get("augment") or {}), "augment")
    if "crop_scale" in aug:
        aug["crop_scale"] = tuple(aug["crop_scale"])
    train = _build_section(TrainConfig, dict(raw.get("train") or {}), "train")
    if "augment" in train:
        raise ConfigError("invalid config key 'train.augment'; use the top-level 'augment' section")
    try:
        train_cfg = TrainConfig(augment=AugmentPolicy(**aug), **train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return model_cfg, train_cfg


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return config_from_dict(raw)


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    d = train_cfg.to_dict()
    augment = d.pop("augment")
    return yaml.safe_dump({"model": model_cfg.to_dict(), "train": d, "augment": augment}, sort_keys=True)


# --------------------------------------------------------------------------
# folds


def make_folds(records: Sequence[ClipRecord], k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Partition case ids into ``k`` near-equal folds.

    Returns ``(train_case_ids, val_case_ids)`` per fold.  Splitting at case
    level keeps near-duplicate frames of one polyp on one side.
    """
    cases = sorted({r.case_id for r in records})
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(cases):
        raise ValueError(f"cannot split {len(cases)} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(len(cases))
    parts = np.array_split(order, k)
    folds = []
    for i in range(k):
        val = sorted(cases[j] for j in parts[i])
        val_set = set(val)
        folds.append(([c for c in cases if c not in val_set], val))
    return folds


def make_optimizer(params, train_cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=train_cfg.lr, betas=train_cfg.betas)


def records_for_cases(records: Sequence[ClipRecord], cases) -> list[ClipRecord]:
    cases = set(cases)
    return [r for r in records if r.case_id in cases]


# --------------------------------------------------------------------------
# window loading


class WindowSet:
    """All stride-F windows of a set of clips, with an optional in-memory cache."""

    def __init__(self, records: Sequence[ClipRecord], frames: int, size, cache_mb: int = 512):
        self.records = {r.clip_id: r for r in records}
        self.windows: list[FrameWindow] = [
            w for r in sorted(records, key=lambda r: r.clip_id) for w in window_clip(r, frames, "train_stride_F")
        ]
        self.size = tuple(size)
        per_window = frames * 4 * self.size[0] * self.size[1] * 4
        self._cache: dict[int, tuple] | None = {} if per_window * len(self.windows) <= cache_mb * 2**20 else None

    def __len__(self):
        return len(self.windows)

    def load(self, i: int):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        w = self.windows[i]
        item = load_window(self.records[w.clip_id], w, self.size)
        if self._cache is not None:
            self._cache[i] = item
        return item

    def batch(self, indices):
        images, masks = zip(*(self.load(i) for i in indices))
        return torch.cat(images), torch.cat(masks)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    fold: int | None
    out_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path | None
    best_val_dice: float | None
    losses: list[float]
    epoch_losses: list[float]
    val_metrics: MetricFrame | None
    trained_clips: set[str]
    steps: int


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def train_fold(
    train_records: Sequence[ClipRecord],
    val_records: Sequence[ClipRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir,
    fold: int | None = None,
    on_batch: Callable[[list[str]], None] | None = None,
) -> TrainResult:
    """Train one model and write checkpoints plus loss curves to ``out_dir``.

    Per step: load a window batch, augment, forward, Dice+BCE, Adam update.
    The checkpoint with the best validation Dice is kept as ``best.npz`` and
    the last state as ``final.npz``.  ``on_batch`` receives the clip ids of
    each training batch.
    """
    from .evaluation import evaluate_split

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True, warn_only=True)
    fold_key = fold or 0

    init_seed = stream_seed(train_cfg, "init") + fold_key
    model = PolypNextLSTM(model_cfg.replace(seed=init_seed % 2**31))
    model.train()
    optimizer = make_optimizer(model.parameters(), train_cfg)
    windows = WindowSet(train_records, model_cfg.frames, model_cfg.input_size, train_cfg.cache_mb)
    if len(windows) == 0:
        raise ValueError("no training windows")
    steps_per_epoch = -(-len(windows) // train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps) if train_cfg.epochs else train_cfg.max_steps
    scheduler = None
    if train_cfg.lr_schedule == "cosine" and total_steps > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)

    shuffle_rng = stream(train_cfg, "shuffle", fold_key)
    augment_rng = stream(train_cfg, "augment", fold_key)
    losses, epoch_losses, trained, rows = [], [], set(), []
    epoch_rows = []
    best_dice, best_path, val_metrics = None, None, None
    step = 0
    epoch = 0

    def validate():
        nonlocal best_dice, best_path, val_metrics
        if not val_records:
            return None
        model.eval()
        report = evaluate_split(model, val_records, model_cfg.frames, batch_size=train_cfg.eval_batch_size)
        model.train()
        if best_dice is None or report.aggregate.dice > best_dice:
            best_dice = report.aggregate.dice
            val_metrics = report.aggregate
            best_path = save_checkpoint(model, out_dir / "best.npz", epoch=epoch, fold=fold)
        return report.aggregate.dice

    while step < total_steps:
        epoch += 1
        order = shuffle_rng.permutation(len(windows))
        epoch_loss = []
        for start in range(0, len(order), train_cfg.batch_size):
            if step >= total_steps:
                break
            idx = order[start:start + train_cfg.batch_size].tolist()
            clip_ids = [windows.windows[i].clip_id for i in idx]
            trained.update(clip_ids)
            if on_batch is not None:
                on_batch(clip_ids)
            images, masks = windows.batch(idx)
            if train_cfg.augment_enabled:
                images, masks = augment_window(images, masks, train_cfg.augment, augment_rng)
            logits = model(images)
            loss = dice_bce_loss(logits.flatten(0, 1), masks.flatten(0, 1))
            value = float(loss.detach())
            step += 1
            if not np.isfinite(value):
                diagnostic = {
                    "fold": fold,
                    "epoch": epoch,
                    "step": step,
                    "loss": repr(value),
                    "windows": [[windows.windows[i].clip_id, list(windows.windows[i].frame_indices)] for i in idx],
                    "loss_history": losses[-50:],
                }
                (out_dir / "diagnostic.json").write_text(json.dumps(diagnostic, indent=2))
                raise NonFiniteLossError(f"non-finite loss {value} at step {step} (fold {fold})", diagnostic)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if train_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            losses.append(value)
            epoch_loss.append(value)
            rows.append((epoch, step, repr(value)))
        epoch_losses.append(float(np.mean(epoch_loss)))
        val_dice = validate()
        epoch_rows.append((epoch, repr(epoch_losses[-1]), "" if val_dice is None else repr(val_dice)))
        log.info("fold %s epoch %d step %d loss %.4f val_dice %s", fold, epoch, step, epoch_losses[-1], val_dice)

    final_path = save_checkpoint(model, out_dir / "final.npz", epoch=epoch, fold=fold)
    _write_csv(out_dir / "loss_curve.csv", ("epoch", "step", "loss"), rows)
    _write_csv(out_dir / "epochs.csv", ("epoch", "mean_loss", "val_dice"), epoch_rows)
    return TrainResult(
        fold=fold,
        out_dir=out_dir,
        final_checkpoint=final_path,
        best_checkpoint=best_path,
        best_val_dice=best_dice,
        losses=losses,
        epoch_losses=epoch_losses,
        val_metrics=val_metrics,
        trained_clips=trained,
        steps=step,
    )


@dataclass
class CVSummary:
    rows: list[dict]  # one per fold: fold, n_val_clips, dice, iou, hd95, recall
    stats: dict  # metric -> {"min", "mean", "max"}
    results: list[TrainResult] = field(default_factory=list, repr=False)

    def write_csv(self, path) -> Path:
        path = Path(path)
        header = ("fold", "n_val_clips", *METRIC_NAMES)
        body = [(r["fold"], r["n_val_clips"], *(repr(r[m]) for m in METRIC_NAMES)) for r in self.rows]
        for stat in ("min", "mean", "max"):
            body.append((stat, "", *(repr(self.stats[m][stat]) for m in METRIC_NAMES)))
        _write_csv(path, header, body)
        return path


def summarize_folds(rows: list[dict]) -> dict:
    stats = {}
    for m in METRIC_NAMES:
        vals = np.array([r[m] for r in rows], dtype=float)
        stats[m] = {"min": float(vals.min()), "mean": float(vals.mean()), "max": float(vals.max())}
    return stats


def run_cv(
    records: Sequence[ClipRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir,
    folds: Sequence[int] | None = None,
) -> CVSummary:
    """Train the requested folds (all by default) and summarize validation metrics.

    Validation metrics come from the best-validation checkpoint of each fold.
    """
    from .evaluation import evaluate_split
    from .model import load_checkpoint

    out_dir = Path(out_dir)
    records = [r for r in records if r.split == "train"] or list(records)
    splits = make_folds(records, train_cfg.folds, stream_seed(train_cfg, "folds"))
    fold_ids = list(range(train_cfg.folds)) if folds is None else list(folds)
    rows, results = [], []
    for i in fold_ids:
        if not 0 <= i < train_cfg.folds:
            raise ValueError(f"fold {i} out of range for {train_cfg.folds} folds")
        train_cases, val_cases = splits[i]
        train_recs = records_for_cases(records, train_cases)
        val_recs = records_for_cases(records, val_cases)
        result = train_fold(train_recs, val_recs, model_cfg, train_cfg, out_dir / f"fold{i}", fold=i)
        ckpt = result.best_checkpoint or result.final_checkpoint
        model = load_checkpoint(ckpt)
        report = evaluate_split(model, val_recs, model_cfg.frames, batch_size=train_cfg.eval_batch_size)
        rows.append({"fold": i, "n_val_clips": len(val_recs), **report.aggregate.as_dict()})
        results.append(result)
    summary = CVSummary(rows, summarize_folds(rows), results)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary.write_csv(out_dir / "cv_summary.csv")
    return summary
