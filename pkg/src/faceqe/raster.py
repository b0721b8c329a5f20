"""Grayscale rasters and the numerical kernels shared by every other module.

Intensity scale: all GrayImage data is float64 in [0, 1] (8-bit value / 255).
Real-valued maps (gradients, spectra, Weber responses) are plain ndarrays.
Borders are always handled by edge replication.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ImageIOError, ValidationError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Immutable single-channel image, row-major ``data[y, x]`` in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("GrayImage data contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("GrayImage intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def clipped(cls, arr: np.ndarray) -> "GrayImage":
        return cls(np.clip(np.nan_to_num(np.asarray(arr, dtype=np.float64)), 0.0, 1.0))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class Kernel:
    """Odd-sized square filter; ``taps[dy, dx]`` with the centre at ``size // 2``."""

    taps: np.ndarray

    def __post_init__(self) -> None:
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise ValidationError(f"kernel must be square with odd size, got shape {taps.shape}")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def size(self) -> int:
        return self.taps.shape[0]


def default_kernel_size(sigma: float) -> int:
    return 2 * math.ceil(3.0 * sigma) + 1


def gaussian_kernel(sigma: float, size: int | None = None) -> Kernel:
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    if size is None:
        size = default_kernel_size(sigma)
    if size < 1 or size % 2 == 0:
        raise ValidationError(f"kernel size must be odd and positive, got {size}")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return Kernel(g / g.sum())


def _as_array(img: GrayImage | np.ndarray) -> np.ndarray:
    return img.data if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def convolve2d_raw(img: GrayImage | np.ndarray, k: Kernel) -> np.ndarray:
    """True 2-D convolution with replicated borders, unclamped output."""
    return ndimage.convolve(_as_array(img), k.taps, mode="nearest")


def convolve2d(img: GrayImage, k: Kernel, border: str = "replicate") -> GrayImage:
    if border != "replicate":
        raise ValidationError(f"unsupported border policy {border!r}")
    return GrayImage.clipped(convolve2d_raw(img, k))


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Gaussian low-pass; ``sigma == 0`` returns the input unchanged."""
    if sigma == 0:
        return img
    return convolve2d(img, gaussian_kernel(sigma))


def sobel_gradient_magnitude(img: GrayImage | np.ndarray) -> np.ndarray:
    """3x3 Sobel magnitude with replicated borders.

    Built from central differences then [1, 2, 1] smoothing (the separable
    form of ``SOBEL_X`` / ``SOBEL_Y``) so a constant image gives exact zeros.
    """
    p = np.pad(_as_array(img), 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return np.hypot(gx, gy)


def dft2(img: GrayImage | np.ndarray) -> np.ndarray:
    """Unnormalised forward 2-D DFT, ``F[v, u]`` with v along rows."""
    return np.fft.fft2(_as_array(img))


def load_image(path: str | Path) -> GrayImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            mode = im.mode
            if fmt not in ("PPM", "PNG"):
                raise ImageIOError(f"{path}: unsupported format {fmt}")
            if im.width == 0 or im.height == 0:
                raise ImageIOError(f"{path}: zero-dimension image")
            if mode == "P":
                im = im.convert("RGBA")
                mode = "RGBA"
            if mode in ("L", "LA"):
                arr = np.asarray(im.getchannel(0), dtype=np.float64)
            elif mode in ("RGB", "RGBA"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                arr = rgb @ np.array(LUMA_WEIGHTS)
            elif mode == "1":
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                raise ImageIOError(f"{path}: unsupported pixel mode {mode} (8-bit only)")
    except (FileNotFoundError, IsADirectoryError, PermissionError, UnidentifiedImageError) as exc:
        raise ImageIOError(f"{path}: cannot read image ({exc})") from exc
    except OSError as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"{path}: cannot decode image ({exc})") from exc
    return GrayImage.clipped(arr / 255.0)


def to_uint8(img: GrayImage) -> np.ndarray:
    return np.rint(img.data * 255.0).astype(np.uint8)


def save_image(img: GrayImage, path: str | Path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".pgm", ".png"):
        raise ImageIOError(f"{path}: only .pgm and .png outputs are supported")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(img)).save(path, format="PPM" if suffix == ".pgm" else "PNG")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc
