"""Population-based asymmetric self-play with low-rank adapter evolution."""

__version__ = "0.1.0"
