"""Continuous instruction sliders for a toy flow-matching MMDiT editor."""

__version__ = "0.1.0"
