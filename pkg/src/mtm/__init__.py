"""Multi-scale token mixing transformer for irregular multivariate time series."""

__version__ = "0.1.0"
