"""Two-stage pose-conditioned person image synthesis with multi-scale discriminators."""

__version__ = "0.1.0"
