"""Quantization-aware training toolkit for Transformer models."""

from .model import (
    ACTIVATION_TAGS,
    WEIGHT_TAGS,
    ModelConfig,
    QuantTransformer,
    base_config,
    beam_search,
    big_config,
    build_layout,
    lm_config,
)
from .quant import QuantParams, QuantPoint, QuantPointConfig, RangeTracker
from .tensor import NumericError, RngState, ShapeError, Tensor
from .train import Regime, TrainConfig

__all__ = [
    "ACTIVATION_TAGS",
    "WEIGHT_TAGS",
    "ModelConfig",
    "NumericError",
    "QuantParams",
    "QuantPoint",
    "QuantPointConfig",
    "QuantTransformer",
    "RangeTracker",
    "Regime",
    "RngState",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "base_config",
    "beam_search",
    "big_config",
    "build_layout",
    "lm_config",
]
