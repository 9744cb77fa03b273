"""Raycasting-based dynamic point removal for static LiDAR map building."""

from raycull.core import Pose, Scan, range_of, transform

__version__ = "0.1.0"

__all__ = ["Pose", "Scan", "range_of", "transform", "__version__"]
