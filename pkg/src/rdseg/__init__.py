"""Cascaded ResDense U-Net segmentation of lungs and COVID-19 infection in CT slices."""

from .eed import EedParams, eed_filter
from .network import ModelConfig, UNet, build_unet
from .pipeline import CascadeResult, run_cascade
from .training import TrainConfig, train

__all__ = [
    "CascadeResult",
    "EedParams",
    "ModelConfig",
    "TrainConfig",
    "UNet",
    "build_unet",
    "eed_filter",
    "run_cascade",
    "train",
]
__version__ = "0.1.0"
