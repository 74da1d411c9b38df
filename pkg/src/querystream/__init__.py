"""Object-centric temporal modelling for streaming multi-view 3D detection."""

__version__ = "0.1.0"
