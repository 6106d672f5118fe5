"""Toy-scale video-text contrastive captioner with attentional-pooler video
adaptors, built on a minimal reverse-mode autodiff engine."""

from .model import ModelConfig, PooledRepresentation, VideoTextModel
from .params import ParameterStore
from .tensor import Tensor, double_precision, finite_diff_check

__all__ = [
    "ModelConfig",
    "ParameterStore",
    "PooledRepresentation",
    "Tensor",
    "VideoTextModel",
    "double_precision",
    "finite_diff_check",
]

__version__ = "0.1.0"
