"""Desk-scale open-vocabulary detector with noisy-positive auxiliary supervision."""

__version__ = "0.1.0"
