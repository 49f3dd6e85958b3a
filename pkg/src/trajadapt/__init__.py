"""Trajectory-conditioned test-time adaptation for frozen segmentation
networks, with ensemble uncertainty, on a synthetic inverse-problem
benchmark."""

__version__ = "0.1.0"
