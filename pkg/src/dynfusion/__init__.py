"""Dynamics-robust dense RGB-D SLAM on a voxel-hashed colour TSDF."""

__version__ = "0.1.0"
