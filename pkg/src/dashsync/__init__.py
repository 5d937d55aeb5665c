"""Dashcam video/IMU synchronization, teacher annotation and evaluation."""

__version__ = "0.1.0"
