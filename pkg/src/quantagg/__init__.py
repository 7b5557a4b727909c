"""Quantile aggregation: scoring, isotonization, ensembling and conformal calibration."""
from .grid import GridError, QuantileGrid

__version__ = "0.1.0"
__all__ = ["GridError", "QuantileGrid", "__version__"]
