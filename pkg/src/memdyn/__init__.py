"""Per-sample membership-inference vulnerability dynamics over training."""

__version__ = "0.1.0"
