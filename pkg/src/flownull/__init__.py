"""Conditional normalizing flow posterior sampling for undersampled multi-coil MRI."""

__version__ = "0.1.0"
