"""Latent prompt assisted medical VQA, built on a small numpy autograd engine."""

from .config import ConfigError, ModelConfig
from .data import QASample, SyntheticSpec, generate, load_dataset
from .model import LaPA
from .train import RunReport, train

__all__ = [
    "ConfigError",
    "LaPA",
    "ModelConfig",
    "QASample",
    "RunReport",
    "SyntheticSpec",
    "generate",
    "load_dataset",
    "train",
]
