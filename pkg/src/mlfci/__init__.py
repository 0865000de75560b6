"""Forecast confidence intervals for machine-learning return predictions,
uncertainty-averse portfolio construction, and FDR-controlled asset selection,
with a Monte Carlo harness that verifies coverage."""

from . import backtest, bootstrap, fourier, nn, portfolio, selection, simulate
from .errors import ConfigError, DataError, NumericalError
from .panel import Panel

__version__ = "0.1.0"

__all__ = [
    "Panel",
    "ConfigError",
    "DataError",
    "NumericalError",
    "backtest",
    "bootstrap",
    "fourier",
    "nn",
    "portfolio",
    "selection",
    "simulate",
]
