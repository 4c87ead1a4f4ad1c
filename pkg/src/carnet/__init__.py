"""In-loop artifact reduction filter for compressed point cloud attributes."""

__version__ = "0.1.0"
