"""Polyp segmentation network with multi-level feature fusion and parallel attention."""
from .core import ConfigError, ModelConfig, validate_config
from .decoder import MISNet, SideOutputs, build_model
from .engine import ABLATIONS, RunConfig, TrainConfig
from .objective import poly_lr, total_loss

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "ConfigError", "MISNet", "ModelConfig", "RunConfig", "SideOutputs", "TrainConfig",
    "build_model", "poly_lr", "total_loss", "validate_config",
]
