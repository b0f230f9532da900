"""Figure rendering for training-run artifacts."""

__version__ = "0.1.0"
