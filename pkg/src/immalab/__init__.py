"""Desk-scale model immunization lab for conditional diffusion on 2-D concepts."""

__version__ = "0.1.0"
