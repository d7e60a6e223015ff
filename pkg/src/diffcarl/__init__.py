"""Diffusion-modeled, carbon- and risk-aware scheduling for microgrid communities."""

__version__ = "0.1.0"
