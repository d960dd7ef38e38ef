"""Granularity-aware feature distillation into a 3D Gaussian field."""

__version__ = "0.1.0"
