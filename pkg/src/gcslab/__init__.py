"""Desk-scale laboratory for score and consistency distillation on an analytic teacher."""

__version__ = "0.1.0"
