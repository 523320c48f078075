"""Joint bundle adjustment and LiDAR registration with extrinsic self-calibration."""

__version__ = "0.1.0"
