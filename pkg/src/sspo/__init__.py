"""Structured set policy optimization on a tiny numpy policy."""

__version__ = "0.1.0"
