"""Adversarial stability training for attention-based GRU translation models."""

__version__ = "0.1.0"
