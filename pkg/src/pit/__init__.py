"""Pooling-based vision transformers on a small numpy autodiff engine."""

from .analysis import count_flops, interaction_ratio, resnet_interaction_approx
from .layers import AttentionRecord, TokenBatch
from .models import ArchConfig, Model, StageConfig, build, forward, preset, toy_config
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "AttentionRecord", "Model", "StageConfig", "Tape", "Tensor", "TokenBatch",
    "build", "count_flops", "forward", "interaction_ratio", "preset", "resnet_interaction_approx",
    "toy_config",
]
