"""Fabry-Perot resonances of high-contrast resonators."""

__version__ = "0.1.0"
