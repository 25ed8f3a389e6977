"""Prototype-based personalized pruning of channel-gated residual networks."""

__version__ = "0.1.0"
