"""Cell detector with sparse-region annotations and morphology attributes."""

__version__ = "0.1.0"
