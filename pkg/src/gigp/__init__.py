"""Semi-supervised 3D segmentation with geometric-moment consistency."""

__version__ = "0.1.0"
