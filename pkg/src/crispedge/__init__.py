"""Crisp boundary detection: fusion loss, refinement network and benchmark."""

__version__ = "0.1.0"
