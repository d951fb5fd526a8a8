"""Two-stage image-guided depth completion with confidence-weighted fusion."""

__version__ = "0.1.0"
