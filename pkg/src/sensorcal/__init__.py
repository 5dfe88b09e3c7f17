"""Joint extrinsic calibration of RGB, depth and LiDAR sensors against a moving board."""

__version__ = "0.1.0"
