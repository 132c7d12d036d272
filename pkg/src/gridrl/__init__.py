"""Voltage control and renewable accommodation on radial distribution networks."""

__version__ = "0.1.0"
