"""Dice + BCE training loss and the Dice / IoU / HD95 / recall metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import binary_erosion, distance_transform_edt

THRESHOLD = 0.5
SMOOTH = 1.0
_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def soft_dice(probs: torch.Tensor, target: torch.Tensor, smooth: float = SMOOTH) -> torch.Tensor:
    """Per-sample soft Dice, shape ``(N,)``."""
    p = probs.flatten(1)
    t = target.flatten(1)
    inter = (p * t).sum(1)
    return (2 * inter + smooth) / (p.sum(1) + t.sum(1) + smooth)


def dice_bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``(1 - soft Dice) + BCE``, each averaged over the batch, weighted 1:1."""
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ in shape")
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target mask must be binary (0/1)")
    target = target.to(logits.dtype)
    dice_term = 1.0 - soft_dice(torch.sigmoid(logits), target).mean()
    bce_term = F.binary_cross_entropy_with_logits(logits, target)
    return dice_term + bce_term


def binarize(logits) -> np.ndarray:
    """Threshold ``sigmoid(logits)`` at 0.5, i.e. ``logits > 0``."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    return np.asarray(logits) > 0.0


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def recall(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(gt.sum())
    if total == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)


def hd95(pred, gt) -> float:
    """95th percentile of symmetric nearest boundary distances, in pixels.

    Both masks empty gives 0; exactly one empty gives the image diagonal.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        return math.hypot(*pred.shape)
    bp, bg = boundary(pred), boundary(gt)
    to_gt = distance_transform_edt(~bg)[bp]
    to_pred = distance_transform_edt(~bp)[bg]
    return float(np.percentile(np.concatenate([to_gt, to_pred]), 95))


@dataclass(frozen=True)
class MetricFrame:
    dice: float
    iou: float
    hd95: float
    recall: float

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = ("dice", "iou", "hd95", "recall")


def frame_metrics(pred, gt) -> MetricFrame:
    return MetricFrame(dice(pred, gt), iou(pred, gt), hd95(pred, gt), recall(pred, gt))


def mean_frames(frames) -> MetricFrame:
    frames = list(frames)
    if not frames:
        raise ValueError("cannot average an empty list of metric frames")
    return MetricFrame(*(float(np.mean([getattr(f, k) for f in frames])) for k in METRIC_NAMES))
