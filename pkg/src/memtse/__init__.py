"""Memory-augmented real-time target speaker extraction on synthetic data."""

__version__ = "0.1.0"
