"""Coupled mechanics and metabolism simulator for tumour spheroids, with surrogate-based UQ."""

__version__ = "0.1.0"
