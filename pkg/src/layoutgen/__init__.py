"""Content-aware layout generation with a dual-branch diffusion transformer."""

__version__ = "0.1.0"
