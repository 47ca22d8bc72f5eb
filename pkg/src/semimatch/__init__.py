"""Semi-supervised dense semantic correspondence with confidence-gated pseudo-labels."""

__version__ = "0.1.0"
