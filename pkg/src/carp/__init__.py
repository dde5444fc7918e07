"""Contrastive passage/critique dual encoders for zero-shot story evaluation."""

__version__ = "0.1.0"
