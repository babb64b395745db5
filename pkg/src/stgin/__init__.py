"""Spatial-temporal graph-informer forecasting at desk scale."""

from .numerics import Tensor, GradReport, grad_check, no_grad

__all__ = ["Tensor", "GradReport", "grad_check", "no_grad"]
__version__ = "0.1.0"
