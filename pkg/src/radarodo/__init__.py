"""Doppler-radar / IMU odometry workbench."""

__version__ = "0.1.0"
