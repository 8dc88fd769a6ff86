"""Normalizing flows on the rotation group SO(3)."""

__version__ = "0.1.0"
