"""Anisotropy-aware planar trajectory planning: search, refinement and tracking."""

__version__ = "0.1.0"
