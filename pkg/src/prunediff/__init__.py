"""Redundancy profiling, progressive block pruning and phase-exchange conditioning for a toy diffusion UNet."""

__version__ = "0.1.0"
