"""Learned lossy image codec: convolutional autoencoder, PCA rotation, bitplane coding."""

__version__ = "0.1.0"
