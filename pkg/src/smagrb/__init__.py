"""Certified reduced-basis solver for the steady 2D Smagorinsky turbulence model."""

__version__ = "0.1.0"
