"""Hybrid text + structured-data multi-label classification of clinical notes."""

__version__ = "0.1.0"
