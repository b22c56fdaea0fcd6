"""Evacuation traffic forecasting with dynamic graph convolution and transfer learning."""

__version__ = "0.1.0"
