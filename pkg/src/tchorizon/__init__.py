"""Temporally consistent horizon estimation: geometry, metrics, recurrent cells and training."""
from .errors import HorizonError
from .geometry import CameraModel, HorizonParams, ImageDims

__all__ = ["CameraModel", "HorizonError", "HorizonParams", "ImageDims"]
__version__ = "0.1.0"
