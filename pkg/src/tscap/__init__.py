"""Truth-conditional program captioning for short time series."""

__version__ = "0.1.0"
