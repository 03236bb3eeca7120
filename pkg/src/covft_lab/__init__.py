"""Desk-scale context-aware visual fine-tuning lab."""

__version__ = "0.1.0"
