"""Batch-wise distributional adversarial detection and defense toolkit."""

__version__ = "0.1.0"
