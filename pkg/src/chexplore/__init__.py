"""Channel exploration (prune-and-regrow) for structured model compression."""

__version__ = "0.1.0"
