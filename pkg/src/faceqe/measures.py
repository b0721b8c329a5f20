"""Scalar quality measures: edge density (focus), low-pass sharpness and block
spectral energy (illumination), plus the set means used as thresholds.

All measures are computed on the [0, 1] intensity scale, so thresholds are
always recomputed from the ingested high-quality set rather than fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ValidationError
from .raster import GrayImage, convolve2d_raw, gaussian_kernel, sobel_gradient_magnitude

KINDS = ("edge_density", "sharpness", "spectral_energy")

DEFAULT_BLOCK = 16
DEFAULT_SHARPNESS_SIGMA = 1.0


@dataclass(frozen=True)
class Region:
    """Inclusive pixel rectangle."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if self.x1 > self.x2 or self.y1 > self.y2 or min(self.x1, self.y1) < 0:
            raise ValidationError(f"invalid region {self}")

    @classmethod
    def full(cls, img: GrayImage) -> "Region":
        return cls(0, 0, img.width - 1, img.height - 1)

    @property
    def area(self) -> int:
        return (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)

    def check(self, img: GrayImage) -> None:
        if self.x2 >= img.width or self.y2 >= img.height:
            raise ValidationError(f"region {self} exceeds image {img.width}x{img.height}")


class MeasureValue(NamedTuple):
    kind: str
    value: float

    def __float__(self) -> float:
        return self.value


def edge_density(img: GrayImage, region: Region | None = None) -> MeasureValue:
    """Mean Sobel gradient magnitude over ``region`` (whole image by default).

    The gradient is taken on the whole image first, so pixels on the region
    border see their true neighbours rather than replicated ones.
    """
    region = region or Region.full(img)
    region.check(img)
    e = sobel_gradient_magnitude(img)
    window = e[region.y1:region.y2 + 1, region.x1:region.x2 + 1]
    return MeasureValue("edge_density", float(window.sum() / region.area))


def sharpness(img: GrayImage, sigma: float = DEFAULT_SHARPNESS_SIGMA) -> MeasureValue:
    low = convolve2d_raw(img, gaussian_kernel(sigma))
    return MeasureValue("sharpness", float(np.abs(img.data - low).mean()))


def _pad_to_multiple(arr: np.ndarray, block: int) -> np.ndarray:
    h, w = arr.shape
    ph = (-h) % block
    pw = (-w) % block
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw)), mode="edge")
    return arr


def spectral_energy(img: GrayImage, block: int = DEFAULT_BLOCK) -> MeasureValue:
    """Sum over non-overlapping blocks of the DFT magnitudes on the pure
    horizontal (first row) and pure vertical (first column) frequency axes,
    DC excluded."""
    if block < 1 or block > min(img.width, img.height):
        raise ValidationError(f"block {block} does not fit a {img.width}x{img.height} image")
    arr = _pad_to_multiple(img.data, block)
    nby, nbx = arr.shape[0] // block, arr.shape[1] // block
    tiles = arr.reshape(nby, block, nbx, block).transpose(0, 2, 1, 3)
    spec = np.abs(np.fft.fft2(tiles, axes=(-2, -1)))
    total = spec[..., 0, 1:].sum() + spec[..., 1:, 0].sum()
    return MeasureValue("spectral_energy", float(total))


def measure(img: GrayImage, kind: str, *, region: Region | None = None,
            sigma: float = DEFAULT_SHARPNESS_SIGMA, block: int = DEFAULT_BLOCK) -> MeasureValue:
    if kind == "edge_density":
        return edge_density(img, region)
    if kind == "sharpness":
        return sharpness(img, sigma)
    if kind == "spectral_energy":
        return spectral_energy(img, block)
    raise ValidationError(f"unknown measure kind {kind!r}")


def measure_all(img: GrayImage, **kw) -> dict[str, float]:
    return {k: measure(img, k, **kw).value for k in KINDS}


def set_mean(values: Iterable[MeasureValue | float], kind: str | None = None) -> float:
    vals = list(values)
    if not vals:
        raise ValidationError("set_mean of an empty list")
    kinds = {v.kind for v in vals if isinstance(v, MeasureValue)}
    if len(kinds) > 1:
        raise ValidationError(f"mixed measure kinds {sorted(kinds)}")
    if kind is not None and kinds and kinds != {kind}:
        raise ValidationError(f"expected {kind} values, got {kinds.pop()}")
    return math.fsum(float(v) for v in vals) / len(vals)
