"""Cavity-based atom counting: transmission model, trace simulation, analysis and adaptive loading."""

__version__ = "0.1.0"
