"""Occlusion-robust single-object tracking: an appearance tracker backed by
camera-motion-compensated trajectory prediction and calibrated switching."""

__version__ = "0.1.0"
