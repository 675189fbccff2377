"""Identity-conditional diffusion with multi-scale cross-attention conditioning."""

__version__ = "0.1.0"
