"""Temporal fusion at the bottleneck.

All variants map ``(B, F, C, h, w)`` to ``(B, F, C, h, w)``.  The recurrent
and attention variants have parameter counts independent of ``F``; the
stacking and 3-D convolution variants are built for one fixed ``F``.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

FUSION_VARIANTS = ("bi_convlstm", "uni_convlstm", "channel_stack", "conv3d", "mha")
FRAME_DEPENDENT_VARIANTS = frozenset({"channel_stack", "conv3d"})


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell without peepholes.

    Gates are computed by one convolution over ``[x; h]`` and split in the
    order input, forget, output, candidate.
    """

    def __init__(self, input_channels: int, hidden_channels: int, kernel_size: int = 3, forget_bias: float = 1.0):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("ConvLSTM kernel size must be odd to preserve spatial size")
        self.input_channels = input_channels
        self.hidden_channels = hidden_channels
        self.conv = nn.Conv2d(
            input_channels + hidden_channels, 4 * hidden_channels, kernel_size, padding=kernel_size // 2
        )
        self.reset_parameters(forget_bias)

    def reset_parameters(self, forget_bias: float = 1.0):
        hc = self.hidden_channels
        with torch.no_grad():
            for g in range(4):
                w = self.conv.weight[g * hc:(g + 1) * hc]
                flat = torch.empty(hc, w[0].numel())
                nn.init.orthogonal_(flat)
                w.copy_(flat.view_as(w))
            self.conv.bias.zero_()
            self.conv.bias[hc:2 * hc].fill_(forget_bias)

    def init_state(self, x):
        b, _, h, w = x.shape
        z = x.new_zeros(b, self.hidden_channels, h, w)
        return z, z.clone()

    def forward(self, x, h_prev, c_prev):
        if x.shape[1] != self.input_channels:
            raise ValueError(f"expected {self.input_channels} input channels, got {x.shape[1]}")
        if x.shape[-2:] != h_prev.shape[-2:] or h_prev.shape != c_prev.shape:
            raise ValueError(
                f"state shapes {tuple(h_prev.shape)}, {tuple(c_prev.shape)} do not match input {tuple(x.shape)}"
            )
        gates = self.conv(torch.cat([x, h_prev], dim=1))
        i, f, o, g = gates.chunk(4, dim=1)
        c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


def run_convlstm(cell: ConvLSTMCell, x, reverse: bool = False):
    """Run ``cell`` over the frame axis of ``(B, F, C, h, w)`` from a zero state."""
    steps = range(x.shape[1] - 1, -1, -1) if reverse else range(x.shape[1])
    h, c = cell.init_state(x[:, 0])
    out = [None] * x.shape[1]
    for t in steps:
        h, c = cell(x[:, t], h, c)
        out[t] = h
    return torch.stack(out, dim=1)


class BiConvLSTM(nn.Module):
    frame_dependent = False

    def __init__(self, channels: int, kernel_size: int = 3, forget_bias: float = 1.0):
        super().__init__()
        if channels % 2:
            raise ValueError("bidirectional fusion needs an even channel count")
        self.forward_cell = ConvLSTMCell(channels, channels // 2, kernel_size, forget_bias)
        self.backward_cell = ConvLSTMCell(channels, channels // 2, kernel_size, forget_bias)

    def forward(self, x):
        fwd = run_convlstm(self.forward_cell, x)
        bwd = run_convlstm(self.backward_cell, x, reverse=True)
        return torch.cat([fwd, bwd], dim=2)


class UniConvLSTM(nn.Module):
    frame_dependent = False

    def __init__(self, channels: int, kernel_size: int = 3, forget_bias: float = 1.0):
        super().__init__()
        self.cell = ConvLSTMCell(channels, channels, kernel_size, forget_bias)

    def forward(self, x):
        return run_convlstm(self.cell, x)


class _FixedFrames(nn.Module):
    frame_dependent = True

    def __init__(self, frames: int):
        super().__init__()
        if frames < 1:
            raise ValueError("frames must be >= 1")
        self.frames = frames

    def _check(self, x):
        if x.shape[1] != self.frames:
            raise ValueError(f"{type(self).__name__} was built for F={self.frames}, got F={x.shape[1]}")


class ChannelStack(_FixedFrames):
    """Stack all frames on the channel axis and mix them with a 1x1 convolution."""

    def __init__(self, channels: int, frames: int):
        super().__init__(frames)
        self.mix = nn.Conv2d(frames * channels, frames * channels, kernel_size=1)

    def forward(self, x):
        self._check(x)
        b, f, c, h, w = x.shape
        return self.mix(x.reshape(b, f * c, h, w)).reshape(b, f, c, h, w)


class Conv3dFusion(_FixedFrames):
    """3-D convolution whose temporal extent spans the whole window.

    The frame axis is zero padded so the output keeps ``F`` frames.
    """

    def __init__(self, channels: int, frames: int, spatial_kernel: int = 3):
        super().__init__(frames)
        self.pad = ((frames - 1) // 2, frames // 2)
        self.conv = nn.Conv3d(
            channels, channels, kernel_size=(frames, spatial_kernel, spatial_kernel),
            padding=(0, spatial_kernel // 2, spatial_kernel // 2),
        )

    def forward(self, x):
        self._check(x)
        y = x.permute(0, 2, 1, 3, 4)
        y = F.pad(y, (0, 0, 0, 0, *self.pad))
        return self.conv(y).permute(0, 2, 1, 3, 4)


class TemporalAttention(nn.Module):
    """Multi-head self-attention across frames, independently per spatial position."""

    frame_dependent = False

    def __init__(self, channels: int, heads: int = 8):
        super().__init__()
        heads = math.gcd(channels, heads)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x):
        b, f, c, h, w = x.shape
        seq = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, f, c)
        out, _ = self.attn(seq, seq, seq, need_weights=False)
        return out.reshape(b, h, w, f, c).permute(0, 3, 4, 1, 2)


def build_fusion(variant: str, channels: int, frames: int, kernel_size: int = 3, heads: int = 8) -> nn.Module:
    if variant == "bi_convlstm":
        return BiConvLSTM(channels, kernel_size)
    if variant == "uni_convlstm":
        return UniConvLSTM(channels, kernel_size)
    if variant == "channel_stack":
        return ChannelStack(channels, frames)
    if variant == "conv3d":
        return Conv3dFusion(channels, frames, kernel_size)
    if variant == "mha":
        return TemporalAttention(channels, heads)
    raise ValueError(f"unknown fusion variant {variant!r}; choose from {list(FUSION_VARIANTS)}")
