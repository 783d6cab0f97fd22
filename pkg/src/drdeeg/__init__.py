"""Distributionally robust training of a compact EEG decoder by sample evolution."""

__version__ = "0.1.0"
