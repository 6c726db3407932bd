"""Discrete LiDAR scene modeling: procedural scans, a VQ-VAE over BEV occupancy grids,
a masked code-map prior, and BEV histogram metrics."""

from .kernels import BACKEND
from .voxel import GridConfig, OccupancyGrid

__version__ = "0.1.0"

__all__ = ["BACKEND", "GridConfig", "OccupancyGrid", "__version__"]
