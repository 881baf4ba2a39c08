"""Hyperspectral image restoration with cascaded low-rank spectral-spatial transformers."""
from .config import BlockConfig, ModelConfig, SlsstConfig
from .errors import ConfigurationError, CubeFormatError, HyperRestormerError, NumericError
from .model import HyperRestormer, apply_ablation, build_model, count_macs, count_parameters

__all__ = [
    "BlockConfig",
    "ModelConfig",
    "SlsstConfig",
    "HyperRestormer",
    "build_model",
    "apply_ablation",
    "count_macs",
    "count_parameters",
    "ConfigurationError",
    "CubeFormatError",
    "HyperRestormerError",
    "NumericError",
]

__version__ = "0.1.0"
