"""Fully sparse LiDAR and camera fusion for 3D object detection, at desk scale."""

__version__ = "1.0.1"

from .pipeline import SparseFusion
