"""Pyramid discrete diffusion over semantic voxel grids."""

__version__ = "0.1.0"
