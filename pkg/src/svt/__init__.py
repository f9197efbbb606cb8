"""Autoregressive video generation with block-local 3D self-attention and
spatiotemporal subscaling, self-contained on numpy.

Subpackages: tensor (arrays + reverse-mode gradients), subscale (slice
geometry), attention (block-local layers), model (encoder/decoder/heads),
optim (RMSProp training), sampler (autoregressive generation), connectivity
(blind-spot analyzer), data (containers + synthetic sprites), metrics
(bits/dim, nats/frame), cli (command line).
"""

from .attention import AttentionLayerSpec, BlockShape
from .model import ModelConfig, ParamStore, build_variant, init_params
from .subscale import SubscaleFactor, slice_order
from .tensor import ConfigError, ShapeError, Tensor

__all__ = [
    "AttentionLayerSpec",
    "BlockShape",
    "ConfigError",
    "ModelConfig",
    "ParamStore",
    "ShapeError",
    "SubscaleFactor",
    "Tensor",
    "build_variant",
    "init_params",
    "slice_order",
]

__version__ = "0.1.0"
