"""Pose-conditioned spatio-temporal attention for action recognition, on a numpy autodiff core."""

__version__ = "0.1.0"
