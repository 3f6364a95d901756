"""Desk-scale masked discrete diffusion vision-language model."""
__version__ = "0.1.0"
