"""Regularized distribution matching distillation on 2D toy problems."""

__version__ = "0.1.0"
