"""Staggered-execution transformer language models at desk scale."""

from .config import ModelConfig, validate_config
from .model import (ModelWeights, count_params, forward_teacher_forced,
                    init_weights, load_checkpoint, save_checkpoint)
from .decode import SamplerSpec, generate

__all__ = [
    "ModelConfig", "validate_config", "ModelWeights", "count_params",
    "forward_teacher_forced", "init_weights", "load_checkpoint",
    "save_checkpoint", "SamplerSpec", "generate",
]
