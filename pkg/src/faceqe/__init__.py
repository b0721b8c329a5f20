"""Face image quality assessment, quality-driven enhancement and CMC evaluation."""

from .errors import FaceQEError, ImageIOError, NumericError, StageError, ValidationError
from .raster import GrayImage, load_image, save_image

__version__ = "0.1.0"

__all__ = ["FaceQEError", "ImageIOError", "NumericError", "StageError", "ValidationError",
           "GrayImage", "load_image", "save_image", "__version__"]
