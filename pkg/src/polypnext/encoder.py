"""Reduced ConvNext-Tiny backbone: patch embedding and three stages of blocks.

The fourth stage and the classifier of the full network are dropped.  Every
stage output is kept as a skip feature for the decoder.  Parameter names
follow ``encoder.stage{s}.block{b}.{tensor}`` once the encoder is mounted
on the full model.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderConfig:
    stage_depths: tuple[int, int, int] = (3, 3, 9)
    stage_channels: tuple[int, int, int] = (96, 192, 384)
    patch_size: int = 4
    mlp_expansion: int = 4
    layer_scale_init: float = 1e-6
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if len(self.stage_depths) != 3 or len(self.stage_channels) != 3:
            raise ValueError("the reduced encoder has exactly three stages")
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    @property
    def stride(self) -> int:
        return self.patch_size * 4


class FeaturePyramid(NamedTuple):
    level1: torch.Tensor
    level2: torch.Tensor
    level3: torch.Tensor


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis of an ``(N, C, H, W)`` tensor, per position."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class PatchEmbed(nn.Module):
    def __init__(self, in_channels: int = 3, out_channels: int = 96, patch_size: int = 4):
        super().__init__()
        self.patch_size = patch_size
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=patch_size, stride=patch_size)
        self.norm = LayerNorm2d(out_channels)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"input size {h}x{w} is not divisible by the patch size {self.patch_size}")
        return self.norm(self.conv(x))


def drop_path(x, p: float, training: bool):
    if p == 0.0 or not training:
        return x
    keep = 1.0 - p
    mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
    return x * mask / keep


class ConvNextBlock(nn.Module):
    def __init__(self, channels: int, expansion: int = 4, layer_scale_init: float = 1e-6, drop_path: float = 0.0):
        super().__init__()
        self.dwconv = nn.Conv2d(channels, channels, kernel_size=7, padding=3, groups=channels)
        self.norm = LayerNorm2d(channels)
        self.pwconv1 = nn.Conv2d(channels, expansion * channels, kernel_size=1)
        self.act = nn.GELU()
        self.pwconv2 = nn.Conv2d(expansion * channels, channels, kernel_size=1)
        self.gamma = nn.Parameter(torch.full((channels,), float(layer_scale_init)))
        self.drop_path = drop_path

    def residual(self, x):
        x = self.pwconv2(self.act(self.pwconv1(self.norm(self.dwconv(x)))))
        return self.gamma[:, None, None] * x

    def forward(self, x):
        return x + drop_path(self.residual(x), self.drop_path, self.training)


class Downsample(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.norm = LayerNorm2d(in_channels)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=2, stride=2)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"downsampling needs even spatial size, got {h}x{w}")
        return self.conv(self.norm(x))


class ConvNextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig(), in_channels: int = 3):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.stage_channels
        total = sum(config.stage_depths)
        rates = np.linspace(0.0, config.drop_path_rate, total).tolist() if total else []
        self.patch_embed = PatchEmbed(in_channels, c1, config.patch_size)
        self.down2 = Downsample(c1, c2)
        self.down3 = Downsample(c2, c3)
        k = 0
        for s, (depth, ch) in enumerate(zip(config.stage_depths, config.stage_channels), start=1):
            blocks = OrderedDict()
            for b in range(depth):
                blocks[f"block{b}"] = ConvNextBlock(ch, config.mlp_expansion, config.layer_scale_init, rates[k])
                k += 1
            setattr(self, f"stage{s}", nn.Sequential(blocks))

    def forward(self, x) -> FeaturePyramid:
        h, w = x.shape[-2:]
        stride = self.config.stride
        if h % stride or w % stride:
            raise ValueError(f"input size {h}x{w} must be divisible by {stride}")
        level1 = self.stage1(self.patch_embed(x))
        level2 = self.stage2(self.down2(level1))
        level3 = self.stage3(self.down3(level2))
        return FeaturePyramid(level1, level2, level3)


# --------------------------------------------------------------------------
# pretrained weights


def _timm_key(name: str) -> str | None:
    """Map one of our parameter names to the timm ``convnext_tiny`` key."""
    parts = name.split(".")
    if parts[0] == "patch_embed":
        return {"conv": "stem.0", "norm": "stem.1"}[parts[1]] + "." + parts[2]
    if parts[0] in ("down2", "down3"):
        stage = int(parts[0][-1]) - 1
        sub = {"norm": "0", "conv": "1"}[parts[1]]
        return f"stages.{stage}.downsample.{sub}.{parts[2]}"
    if parts[0].startswith("stage"):
        stage = int(parts[0][5:]) - 1
        block = int(parts[1][5:])
        tensor = {
            "dwconv": "conv_dw",
            "norm": "norm",
            "pwconv1": "mlp.fc1",
            "pwconv2": "mlp.fc2",
            "gamma": "gamma",
        }[parts[2]]
        suffix = "" if parts[2] == "gamma" else "." + parts[3]
        return f"stages.{stage}.blocks.{block}.{tensor}{suffix}"
    return None


def load_pretrained(encoder: ConvNextEncoder, path) -> list[str]:
    """Load weights from a ``.npz`` archive keyed either by our names or timm's.

    Linear-layer MLP weights ``(out, in)`` are reshaped to 1x1 convolutions.
    Keys for the removed fourth stage and head are ignored.  Returns the
    list of loaded parameter names; a missing key is an error.
    """
    with np.load(Path(path)) as archive:
        arrays = {k: archive[k] for k in archive.files}
    state = encoder.state_dict()
    loaded, missing = [], []
    for name, tensor in state.items():
        src = arrays.get(name)
        if src is None:
            src = arrays.get(f"encoder.{name}")
        if src is None:
            key = _timm_key(name)
            src = arrays.get(key) if key else None
        if src is None:
            missing.append(name)
            continue
        src = torch.as_tensor(np.asarray(src), dtype=tensor.dtype)
        if src.numel() != tensor.numel():
            raise ValueError(f"{name}: archive shape {tuple(src.shape)} does not fit {tuple(tensor.shape)}")
        state[name] = src.reshape(tensor.shape)
        loaded.append(name)
    if missing:
        raise KeyError(f"pretrained archive lacks {len(missing)} tensors, e.g. {missing[:5]}")
    encoder.load_state_dict(state)
    return loaded
