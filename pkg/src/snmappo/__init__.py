"""MAPPO with spectral normalization on the centralized critic, from scratch in numpy."""

__version__ = "0.1.0"
