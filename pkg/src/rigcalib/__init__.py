"""Targetless extrinsic calibration of multi-LiDAR rigs against a GNSS-aided INS."""

__version__ = "0.1.0"
