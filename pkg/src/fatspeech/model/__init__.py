"""Model architecture, checkpoint container, and warm-start initialization."""

from .network import FATModel, FusedStates, downsampled_length, SEGMENT_ORDER
from .checkpoint import (
    ModelCheckpoint, save_checkpoint, load_checkpoint, build_model,
    average_checkpoints, init_from_pretrained, write_raw_checkpoint,
)

__all__ = [
    "FATModel", "FusedStates", "downsampled_length", "SEGMENT_ORDER",
    "ModelCheckpoint", "save_checkpoint", "load_checkpoint", "build_model",
    "average_checkpoints", "init_from_pretrained", "write_raw_checkpoint",
]
