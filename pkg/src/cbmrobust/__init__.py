"""Concept-space attack, robustness and stability-training toolkit for
concept-bottleneck classifier heads."""

__version__ = "0.1.0"
