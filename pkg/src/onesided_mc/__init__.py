"""One-sided matrix completion from ultra-sparse observations."""

__version__ = "0.1.0"
