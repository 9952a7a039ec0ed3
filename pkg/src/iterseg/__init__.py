"""Iterative convolutional encoder-decoder for binary image segmentation."""

__version__ = "0.1.0"

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .engine import IterationConfig, OptimConfig, converged, infer, initial_map, refine, train
from .metrics import LossConfig, dice, iter_loss, jaccard, soft_dice
from .network import ConfigError, NetworkConfig, ParameterSet, SegmentationMap, build, forward

__all__ = [
    "CheckpointError",
    "ConfigError",
    "IterationConfig",
    "LossConfig",
    "NetworkConfig",
    "OptimConfig",
    "ParameterSet",
    "SegmentationMap",
    "build",
    "converged",
    "dice",
    "forward",
    "infer",
    "initial_map",
    "iter_loss",
    "jaccard",
    "load_checkpoint",
    "refine",
    "save_checkpoint",
    "soft_dice",
    "train",
]
