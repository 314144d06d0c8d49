"""Chunk-recurrent training of a tiny decoder-only transformer over a paged KV cache."""

from chunktrain.errors import ConfigError, ResidencyError, ShapeError, StateError
from chunktrain.model import ModelConfig, desk_config, init_params

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ResidencyError",
    "ShapeError",
    "StateError",
    "desk_config",
    "init_params",
]

__version__ = "0.1.0"
