"""Physically based LiDAR sensor model, calibration and voxel-field resimulation."""

__version__ = "0.1.0"
