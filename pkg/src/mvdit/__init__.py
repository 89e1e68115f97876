"""Desk-scale multi-view video generation: a rectified-flow spatial-temporal
diffusion transformer with caption, layout and road-sketch conditioning,
trained on a procedurally generated toy world."""

from .conditioning import ConditionTriple, LayoutEntry
from .flow import MaskSpec, SamplerConfig
from .model import ModelConfig

__all__ = ["ConditionTriple", "LayoutEntry", "MaskSpec", "SamplerConfig",
           "ModelConfig"]
__version__ = "0.1.0"
