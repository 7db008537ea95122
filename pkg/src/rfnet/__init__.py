"""Depth-robust RGB-D salient object detection on a small numpy autodiff engine."""

__version__ = "0.1.0"
