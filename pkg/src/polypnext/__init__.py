"""Video polyp segmentation: pruned ConvNext-Tiny encoder, bidirectional ConvLSTM bottleneck, UNet decoder."""

__version__ = "0.1.0"

from .model import ModelConfig, PolypNextLSTM, count_parameters, load_checkpoint, save_checkpoint  # noqa: E402,F401
