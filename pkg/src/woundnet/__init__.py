"""Joint wound classification and segmentation with a from-scratch U-Net."""

__version__ = "0.1.0"

from .model import ArchSpec, DEFAULT_ARCH, TINY_ARCH, build_model, forward, backward
from .trainer import TrainConfig, train, evaluate, predict, load_checkpoint, save_checkpoint

__all__ = [
    "ArchSpec", "DEFAULT_ARCH", "TINY_ARCH", "build_model", "forward", "backward",
    "TrainConfig", "train", "evaluate", "predict", "load_checkpoint", "save_checkpoint",
]
