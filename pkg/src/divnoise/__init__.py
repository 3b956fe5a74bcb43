"""Unsupervised diverse image denoising with explicit pixel noise models.

A fully convolutional VAE learns a distribution over clean signals from noisy
images alone; posterior sampling yields diverse denoised candidates that can
be averaged (MMSE), mode-sought (MAP), or fused downstream (segmentation
consensus).
"""

from . import (
    cli,
    data,
    evaluation,
    inference,
    noise_models,
    seeding,
    segmentation,
    synthetic,
    training,
    vae,
)
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DivnoiseError,
    DomainError,
    EmptyDatasetError,
    FormatError,
    InputError,
)

__version__ = "0.1.0"

__all__ = [
    "cli",
    "data",
    "evaluation",
    "inference",
    "noise_models",
    "seeding",
    "segmentation",
    "synthetic",
    "training",
    "vae",
    "errors",
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "DivnoiseError",
    "DomainError",
    "EmptyDatasetError",
    "FormatError",
    "InputError",
    "__version__",
]
