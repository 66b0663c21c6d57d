"""Utilities: logging setup, metric logs and argument validation."""

__version__ = "0.1.0"
