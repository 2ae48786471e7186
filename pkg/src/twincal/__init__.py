"""Continuous calibration of a tunnel-farm heat and moisture simulator."""

__version__ = "0.1.0"
