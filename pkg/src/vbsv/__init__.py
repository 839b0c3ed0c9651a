"""Variational Bayes for large VARs with stochastic volatility."""

from vbsv.band import BACKEND as BAND_BACKEND

__version__ = "0.1.0"

__all__ = ["BAND_BACKEND", "__version__"]
