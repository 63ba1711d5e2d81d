"""PolypNextLSTM: encoder, bottleneck fusion and decoder behind one forward pass."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .decoder import Decoder, DecoderConfig
from .encoder import ConvNextEncoder, EncoderConfig
from .fusion import FRAME_DEPENDENT_VARIANTS, FUSION_VARIANTS, build_fusion

META_KEY = "__meta__"


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 5
    input_size: tuple[int, int] = (256, 256)
    fusion_variant: str = "bi_convlstm"
    fusion_kernel: int = 3
    mha_heads: int = 8
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        size = tuple(int(s) for s in self.input_size)
        if len(size) != 2 or any(s <= 0 or s % self.encoder.stride for s in size):
            raise ValueError(f"input_size {self.input_size} must be positive and divisible by {self.encoder.stride}")
        object.__setattr__(self, "input_size", size)
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion_variant!r}; choose from {list(FUSION_VARIANTS)}")

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig.from_encoder(self.encoder.stage_channels)

    @classmethod
    def reduced(cls, divisor: int = 8, **kwargs) -> "ModelConfig":
        """Same topology with every encoder width divided by ``divisor``."""
        depths = kwargs.pop("stage_depths", EncoderConfig().stage_depths)
        channels = tuple(c // divisor for c in EncoderConfig().stage_channels)
        return cls(encoder=EncoderConfig(stage_depths=depths, stage_channels=channels), **kwargs)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["encoder"]["stage_depths"] = list(self.encoder.stage_depths)
        d["encoder"]["stage_channels"] = list(self.encoder.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config key(s): {sorted(unknown)}")
        enc = dict(d.pop("encoder", {}) or {})
        enc_fields = {f.name for f in dataclasses.fields(EncoderConfig)}
        if set(enc) - enc_fields:
            raise ValueError(f"unknown encoder config key(s): {sorted(set(enc) - enc_fields)}")
        for k in ("stage_depths", "stage_channels"):
            if k in enc:
                enc[k] = tuple(enc[k])
        if "input_size" in d:
            size = d["input_size"]
            d["input_size"] = (size, size) if isinstance(size, int) else tuple(size)
        return cls(encoder=EncoderConfig(**enc), **d)

    def architecture_hash(self) -> str:
        """Hash of every field that determines parameter shapes."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("input_size")
        if self.fusion_variant not in FRAME_DEPENDENT_VARIANTS:
            d.pop("frames")
        if self.fusion_variant != "mha":
            d.pop("mha_heads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def flatten_frames(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:])


def unflatten_frames(x: torch.Tensor, batch: int, frames: int) -> torch.Tensor:
    return x.reshape(batch, frames, *x.shape[1:])


class PolypNextLSTM(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoder = ConvNextEncoder(config.encoder)
            self.fusion = build_fusion(
                config.fusion_variant,
                config.encoder.stage_channels[-1],
                config.frames,
                config.fusion_kernel,
                config.mha_heads,
            )
            self.decoder = Decoder(config.decoder)

    def forward(self, x):
        if x.ndim != 5:
            raise ValueError(f"expected a (B, F, C, H, W) clip tensor, got shape {tuple(x.shape)}")
        b, f = x.shape[:2]
        if tuple(x.shape[-2:]) != self.config.input_size:
            raise ValueError(f"input size {tuple(x.shape[-2:])} does not match configured {self.config.input_size}")
        pyramid = self.encoder(flatten_frames(x))
        fused = self.fusion(unflatten_frames(pyramid.level3, b, f))
        logits = self.decoder(flatten_frames(fused), pyramid)
        return unflatten_frames(logits, b, f)


def count_parameters(model: PolypNextLSTM) -> dict[str, int]:
    def n(m):
        return sum(p.numel() for p in m.parameters() if p.requires_grad)

    counts = {"encoder": n(model.encoder), "fusion": n(model.fusion), "decoder": n(model.decoder)}
    counts["total"] = sum(counts.values())
    return counts


# --------------------------------------------------------------------------
# checkpoints: a zip of named float arrays plus a JSON metadata entry


def save_checkpoint(model: PolypNextLSTM, path, *, epoch=None, fold=None, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": model.config.to_dict(),
        "config_hash": model.config.architecture_hash(),
        "seed": model.config.seed,
        "epoch": epoch,
        "fold": fold,
    }
    if extra:
        meta.update(extra)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable or truncated: {exc}") from None
    if META_KEY not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata entry")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    return arrays, meta


def load_checkpoint(path, config: ModelConfig | None = None) -> PolypNextLSTM:
    """Rebuild a model from ``path``.

    With ``config`` given the stored architecture hash must match it; a
    frame-count change is allowed for variants whose parameters do not
    depend on ``F``.
    """
    arrays, meta = read_checkpoint(path)
    stored = ModelConfig.from_dict(meta["config"])
    if config is None:
        config = stored
    elif config.architecture_hash() != meta["config_hash"]:
        raise CheckpointError(
            f"checkpoint {path} was written for architecture {meta['config_hash']} "
            f"but config gives {config.architecture_hash()}"
        )
    model = PolypNextLSTM(config)
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise CheckpointError(f"checkpoint {path} key mismatch; missing={missing} unexpected={extra}")
    for k, v in arrays.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise CheckpointError(f"{k}: checkpoint shape {v.shape} vs model {tuple(state[k].shape)}")
        state[k] = torch.from_numpy(v.copy())
    model.load_state_dict(state)
    model.checkpoint_meta = meta
    return model

