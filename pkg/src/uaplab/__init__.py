"""Desk-scale lab for universal image+text perturbations against a toy
dual-encoder retrieval model."""

__version__ = "0.1.0"
