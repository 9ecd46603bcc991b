"""Voxel-anchored Gaussian splatting with self-supervised velocity and photometric losses."""

__version__ = "0.1.0"
