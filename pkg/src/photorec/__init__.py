"""Tourist attraction recommendation from geo-tagged photos."""

__version__ = "0.1.0"
