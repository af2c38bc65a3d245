"""Masked Riemannian flow matching on paired hyperspherical embeddings."""

from .errors import AntipodalError, ConfigError, ConvergenceError, DataError, GeoFlowError, NumericalError
from .geometry import EuclideanGeometry, FlowMask, MaskKind, SphereGeometry
from .net import NetConfig, VelocityNet, load_checkpoint, save_checkpoint
from .runtime import DecompositionReport, DensityEstimate, SolverConfig, decompose, log_density, sample
from .train import TrainConfig

__all__ = [
    "AntipodalError", "ConfigError", "ConvergenceError", "DataError", "GeoFlowError", "NumericalError",
    "EuclideanGeometry", "FlowMask", "MaskKind", "SphereGeometry",
    "NetConfig", "VelocityNet", "load_checkpoint", "save_checkpoint",
    "DecompositionReport", "DensityEstimate", "SolverConfig", "decompose", "log_density", "sample",
    "TrainConfig",
]
