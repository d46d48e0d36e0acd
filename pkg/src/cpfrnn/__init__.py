"""Recurrent forecasting with particle-filtered hidden states."""

__version__ = "0.1.0"
