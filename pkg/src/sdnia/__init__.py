"""Stylization-driven data synthesis, neural image adaptation and joint detection training."""

__version__ = "0.1.0"
