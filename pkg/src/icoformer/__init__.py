"""Spherical local-attention U-Net on icosphere graphs, in numpy."""
from .model import ModelConfig, SphereUNet, build_model, flop_estimate, param_count
from .sphere import NodeType, SphereGraph, icosphere

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "NodeType", "SphereGraph", "SphereUNet", "build_model", "flop_estimate",
    "icosphere", "param_count",
]
