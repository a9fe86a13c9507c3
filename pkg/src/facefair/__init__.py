"""Deterministic desk-scale audit of demographic disparity in face recognition."""

__version__ = "0.1.0"
