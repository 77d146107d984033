"""Fused acoustic/text masked pretraining and end-to-end speech translation."""

__version__ = "0.1.0"
