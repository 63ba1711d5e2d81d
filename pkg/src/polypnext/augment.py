"""Geometric training augmentation applied identically to every frame of a window."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentPolicy:
    rotation_degrees: float = 15.0
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    crop_scale: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees is a symmetric half-range and must be >= 0")
        object.__setattr__(self, "crop_scale", (float(lo), float(hi)))

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(rotation_degrees=0.0, p_hflip=0.0, p_vflip=0.0, crop_scale=(1.0, 1.0))


@dataclass(frozen=True)
class TransformParams:
    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False
    area: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.angle == 0.0 and not self.hflip and not self.vflip and self.area == 1.0


def draw_params(policy: AugmentPolicy, rng: np.random.Generator) -> TransformParams:
    """One draw per window.  The number of values consumed from ``rng`` is fixed."""
    u = rng.random(4)
    r = policy.rotation_degrees
    lo, hi = policy.crop_scale
    return TransformParams(
        angle=float(-r + 2 * r * u[0]) if r > 0 else 0.0,
        hflip=bool(u[1] < policy.p_hflip),
        vflip=bool(u[2] < policy.p_vflip),
        area=float(lo + (hi - lo) * u[3]) if hi > lo else hi,
    )


def _affine_matrix(params: TransformParams, h: int, w: int) -> torch.Tensor:
    # Maps output normalized coords to input coords: a center crop keeping
    # `area` of the image, rotated by `angle`, with aspect correction.
    zoom = math.sqrt(params.area)
    a = math.radians(params.angle)
    c, s = math.cos(a), math.sin(a)
    return torch.tensor(
        [[c * zoom, -s * zoom * h / w, 0.0], [s * zoom * w / h, c * zoom, 0.0]],
        dtype=torch.float64,
    )


def apply_transform(x: torch.Tensor, params: TransformParams, mode: str = "bilinear") -> torch.Tensor:
    """Apply one geometric transform to every image in an ``(N, C, H, W)`` batch."""
    if params.angle != 0.0 or params.area != 1.0:
        n, _, h, w = x.shape
        theta = _affine_matrix(params, h, w).to(x.dtype).expand(n, 2, 3)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode=mode, padding_mode="zeros", align_corners=False)
    if params.hflip:
        x = torch.flip(x, dims=[-1])
    if params.vflip:
        x = torch.flip(x, dims=[-2])
    return x


def augment_window(images: torch.Tensor, masks: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator):
    """Augment a ``(B, F, 3, H, W)`` / ``(B, F, 1, H, W)`` pair.

    Each window in the batch gets its own parameter draw; all frames and
    masks of that window share it.  Masks are resampled nearest-neighbour
    and re-binarized at 0.5.
    """
    if images.ndim != 5 or masks.ndim != 5:
        raise ValueError("expected 5-D image and mask tensors")
    if images.shape[:2] != masks.shape[:2] or images.shape[-2:] != masks.shape[-2:]:
        raise ValueError(
            f"image window {tuple(images.shape)} and mask window {tuple(masks.shape)} disagree on B, F, H or W"
        )
    out_img, out_mask = [], []
    for b in range(images.shape[0]):
        params = draw_params(policy, rng)
        if params.is_identity:
            out_img.append(images[b].clone())
            out_mask.append(masks[b].clone())
            continue
        out_img.append(apply_transform(images[b], params, "bilinear"))
        m = apply_transform(masks[b], params, "nearest")
        out_mask.append((m >= 0.5).to(masks.dtype))
    return torch.stack(out_img), torch.stack(out_mask)
