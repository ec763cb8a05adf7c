"""Short-term traffic congestion forecasting with a periodic-folding convolutional network."""

__version__ = "0.1.0"
