"""Cross-modality masked autoencoding for multi-sensor time series."""

__version__ = "0.1.0"
