"""Open-set LiDAR segmentation by octree reconstruction and a Mamba-style detector."""

__version__ = "0.1.0"
