"""Score-guided vote refinement for 3D object detection on synthetic indoor point clouds."""

__version__ = "0.1.0"
