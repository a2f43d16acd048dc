"""version information only."""

__version__ = "0.1.0"
