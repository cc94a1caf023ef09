"""Tri-view vision transformer for volumetric age regression."""

__version__ = "0.1.0"
