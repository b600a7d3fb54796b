"""ReplaceBlock regularization on a from-scratch numpy CNN stack."""

from .model import MiniCNN
from .regularizers import (
    Cutout,
    DropBlock,
    Dropout,
    ReplaceBlock,
    ReplaceBlockConfig,
    SpatialDropout,
    build_regularizer,
)
from .train import SGD, TrainConfig, forward, train_epoch

__all__ = [
    "Cutout",
    "DropBlock",
    "Dropout",
    "MiniCNN",
    "ReplaceBlock",
    "ReplaceBlockConfig",
    "SGD",
    "SpatialDropout",
    "TrainConfig",
    "build_regularizer",
    "forward",
    "train_epoch",
]

__version__ = "0.1.0"
