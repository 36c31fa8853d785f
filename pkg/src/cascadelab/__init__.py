"""Dual-stream CASCADE transformer interpretability workbench."""

__version__ = "0.1.0"
