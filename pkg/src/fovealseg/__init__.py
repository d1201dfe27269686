"""Gaze-conditioned foveated instance segmentation and frame scheduling."""
__version__ = "0.1.0"
