"""Interpolation-prediction networks for sparse, irregularly sampled multivariate time series."""

__version__ = "0.1.0"
