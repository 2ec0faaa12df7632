"""Cross-snapshot crosscoders and feature-evolution analyses."""

__version__ = "0.1.0"
