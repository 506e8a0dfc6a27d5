"""Desk-scale simulator of robotic ultrasound thyroid volumetry."""

__version__ = "0.1.0"
