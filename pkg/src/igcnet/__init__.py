"""Regression-based iterative G-computation for conditional average
potential outcomes under time-varying confounding."""
from .backbone import BackboneConfig, ConfigError
from .igc import BiasedIgcModel, IgcModel, predict_capo, predict_queries, predict_with_uncertainty
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "BiasedIgcModel",
    "ConfigError",
    "IgcModel",
    "TrainConfig",
    "fit",
    "predict_capo",
    "predict_queries",
    "predict_with_uncertainty",
]
