"""Source-space MEG decoding toolkit on synthetic data."""

__version__ = "0.1.0"
