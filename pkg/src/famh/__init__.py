"""Masked-autoencoder pretraining on wrist accelerometry with spectral reconstruction losses."""

__version__ = "0.1.0"
