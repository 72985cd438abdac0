"""Two-hand + object 3D pose estimation from keypoint tokens."""

__version__ = "0.1.0"
