"""Bimanual grasp saliency learning, physics-aware refinement and contact extraction."""

__version__ = "0.1.0"
