"""Tightly-coupled RGB-D / inertial / legged-odometry SLAM library."""

__version__ = "0.1.0"
