"""UNet-style decoder: transposed-convolution upsampling merged with encoder skips."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import FeaturePyramid


@dataclass(frozen=True)
class StagePlan:
    in_channels: int
    skip_channels: int
    out_channels: int
    double_conv: bool = True


@dataclass(frozen=True)
class DecoderConfig:
    stage_plan: tuple[StagePlan, ...]
    head_channels: int

    @classmethod
    def from_encoder(cls, stage_channels=(96, 192, 384)) -> "DecoderConfig":
        """Derive the halving plan from the encoder widths.

        /16 -> /8 and /8 -> /4 merge the level-2 and level-1 skips; the two
        remaining upsamplings to /2 and /1 have no skip.  With widths
        (96, 192, 384) the head sees 24 channels.
        """
        c1, c2, c3 = stage_channels
        if c3 != 2 * c2 or c2 != 2 * c1 or c1 % 4:
            raise ValueError(f"encoder widths {stage_channels} do not support the halving decoder plan")
        plan = (
            StagePlan(c3, c2, c2),
            StagePlan(c2, c1, c1),
            StagePlan(c1, 0, c1 // 2),
            StagePlan(c1 // 2, 0, c1 // 4, double_conv=False),
        )
        return cls(plan, c1 // 4)


class DoubleConv(nn.Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU; halves channels unless ``out_channels`` is given."""

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__()
        if out_channels is None:
            if in_channels % 2:
                raise ValueError(f"DoubleConv halves channels and needs an even count, got {in_channels}")
            out_channels = in_channels // 2
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Upsample(nn.Module):
    """2x2 stride-2 transposed convolution halving the channel count."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.ConvTranspose2d(in_channels, in_channels // 2, kernel_size=2, stride=2)

    def forward(self, x):
        return self.conv(x)


class DecoderStage(nn.Module):
    def __init__(self, plan: StagePlan):
        super().__init__()
        self.up = Upsample(plan.in_channels)
        merged = plan.in_channels // 2 + plan.skip_channels
        self.conv = DoubleConv(merged, plan.out_channels) if plan.double_conv else None
        if self.conv is None and merged != plan.out_channels:
            raise ValueError(f"stage without DoubleConv must output {merged} channels")

    def forward(self, x, skip=None):
        x = self.up(x)
        if skip is not None:
            if skip.shape[0] != x.shape[0] or skip.shape[-2:] != x.shape[-2:]:
                raise ValueError(f"skip feature {tuple(skip.shape)} does not match upsampled {tuple(x.shape)}")
            x = torch.cat([x, skip], dim=1)
        return self.conv(x) if self.conv is not None else x


class Decoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        for name, plan in zip("ABCD", config.stage_plan):
            setattr(self, f"stage{name}", DecoderStage(plan))
        self.head = nn.Conv2d(config.head_channels, 1, kernel_size=1)

    def forward(self, bottleneck, skips: FeaturePyramid):
        """Return ``(N, 1, H, W)`` logits; the bottleneck replaces ``skips.level3``."""
        expected = (skips.level2.shape[1], skips.level1.shape[1])
        got = (self.config.stage_plan[0].skip_channels, self.config.stage_plan[1].skip_channels)
        if expected != got:
            raise ValueError(f"skip channels {expected} do not match decoder plan {got}")
        x = self.stageA(bottleneck, skips.level2)
        x = self.stageB(x, skips.level1)
        x = self.stageC(x)
        x = self.stageD(x)
        return self.head(x)
