"""Self-learning adaptive-optics control for multi-aperture laser beaming."""

__version__ = "0.1.0"
