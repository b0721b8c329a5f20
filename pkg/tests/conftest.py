import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

sys.path.insert(0, str(Path(__file__).parent))

from faceqe.raster import GrayImage  # noqa: E402


def textured(rng: np.random.Generator, n: int = 32, smooth: float = 1.0) -> GrayImage:
    """Random band-limited texture in roughly [0.1, 0.9]."""
    f = ndimage.gaussian_filter(rng.standard_normal((n, n)), smooth, mode="wrap")
    f = (f - f.min()) / (f.max() - f.min())
    return GrayImage(0.1 + 0.8 * f)


def random_image(rng: np.random.Generator, h: int, w: int | None = None) -> GrayImage:
    return GrayImage(rng.random((h, w or h)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
