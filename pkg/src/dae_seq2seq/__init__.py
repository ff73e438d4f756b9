"""Denoising-autoencoder pre-training for sequence-to-sequence generation."""

__version__ = "0.1.0"
