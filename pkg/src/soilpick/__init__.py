"""Seedable simulator and control stack for picking soil samples from mixed terrain."""

__version__ = "0.1.0"
