"""Disentangled multi-modal representation learning on paired 2-D images."""

__version__ = "0.1.0"
