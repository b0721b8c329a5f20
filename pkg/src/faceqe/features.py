"""Face descriptors (Gabor, LBP, HoG, Gist, external embeddings) and cosine matching.

Every extractor returns an L2-normalised :class:`FeatureVector`; inputs whose
raw descriptor is numerically zero (e.g. a flat image under DC-free Gabor
filters) come back as all-zero vectors with ``is_zero`` set.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ImageIOError, NumericError, ValidationError
from .raster import GrayImage

FEATURE_KINDS = ("gabor", "lbp", "hog", "gist", "external")

ZERO_NORM = 1e-9

# Gabor bank constants: k_max = pi/2, scale ratio sqrt(2), envelope width 2*pi.
GABOR_KMAX = math.pi / 2
GABOR_SCALE_RATIO = math.sqrt(2.0)
GABOR_SIGMA = 2 * math.pi

LBP_CELL = 16
HOG_CELL = 8
HOG_BINS = 9
HOG_EPS = 1e-6
GIST_GRID = 4


@dataclass(frozen=True, eq=False)
class FeatureVector:
    kind: str
    values: np.ndarray
    is_zero: bool = False

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size == 0:
            raise ValidationError("feature vector must be non-empty")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size

    @classmethod
    def normalized(cls, kind: str, raw: np.ndarray) -> "FeatureVector":
        raw = np.asarray(raw, dtype=np.float64).ravel()
        n = float(np.linalg.norm(raw))
        if n <= ZERO_NORM:
            return cls(kind, np.zeros_like(raw), is_zero=True)
        return cls(kind, raw / n)


@dataclass(frozen=True)
class GaborBankParams:
    scales: int = 5
    orientations: int = 8
    downsample: int = 4

    def __post_init__(self) -> None:
        if self.scales < 1 or self.orientations < 1 or self.downsample < 1:
            raise ValidationError("Gabor bank parameters must all be >= 1")


def gabor_kernel(scale: int, orientation: int, n_orient: int) -> np.ndarray:
    """Complex, zero-mean Gabor kernel for one (scale, orientation) cell of the bank."""
    k = GABOR_KMAX / GABOR_SCALE_RATIO ** scale
    phi = math.pi * orientation / n_orient
    half = math.ceil(3.0 * GABOR_SIGMA / k)
    d = np.arange(-half, half + 1, dtype=np.float64)
    x, y = np.meshgrid(d, d)
    k2, s2 = k * k, GABOR_SIGMA ** 2
    envelope = (k2 / s2) * np.exp(-k2 * (x * x + y * y) / (2.0 * s2))
    carrier = np.exp(1j * k * (math.cos(phi) * x + math.sin(phi) * y)) - math.exp(-s2 / 2.0)
    g = envelope * carrier
    return g - g.mean()


@lru_cache(maxsize=8)
def _bank(params: GaborBankParams) -> tuple[np.ndarray, ...]:
    return tuple(gabor_kernel(s, o, params.orientations)
                 for s in range(params.scales) for o in range(params.orientations))


@lru_cache(maxsize=8)
def _bank_otfs(params: GaborBankParams, shape: tuple[int, int]) -> tuple[int, np.ndarray]:
    kernels = _bank(params)
    pad = max(k.shape[0] for k in kernels) // 2
    ph, pw = shape[0] + 2 * pad, shape[1] + 2 * pad
    otfs = np.empty((len(kernels), ph, pw), dtype=np.complex128)
    for i, kern in enumerate(kernels):
        r = kern.shape[0] // 2
        arr = np.zeros((ph, pw), dtype=np.complex128)
        arr[:kern.shape[0], :kern.shape[1]] = kern
        otfs[i] = np.fft.fft2(np.roll(arr, (-r, -r), axis=(0, 1)))
    otfs.setflags(write=False)
    return pad, otfs


def gabor_magnitudes(img: GrayImage, params: GaborBankParams = GaborBankParams()) -> np.ndarray:
    """|img * g| for every bank filter, shape (scales*orientations, H, W), replicate borders."""
    pad, otfs = _bank_otfs(params, img.shape)
    padded = np.pad(img.data, pad, mode="edge")
    resp = np.fft.ifft2(np.fft.fft2(padded)[None] * otfs)
    h, w = img.shape
    return np.abs(resp[:, pad:pad + h, pad:pad + w])


def block_mean(maps: np.ndarray, fy: int, fx: int) -> np.ndarray:
    """Average (..., H, W) over non-overlapping fy x fx blocks; a ragged edge is dropped."""
    h, w = maps.shape[-2] // fy * fy, maps.shape[-1] // fx * fx
    m = maps[..., :h, :w]
    m = m.reshape(*m.shape[:-2], h // fy, fy, w // fx, fx)
    return m.mean(axis=(-3, -1))


def extract_gabor(img: GrayImage, p: GaborBankParams = GaborBankParams()) -> FeatureVector:
    mags = gabor_magnitudes(img, p)
    return FeatureVector.normalized("gabor", block_mean(mags, p.downsample, p.downsample))


def extract_gist(img: GrayImage, p: GaborBankParams = GaborBankParams()) -> FeatureVector:
    mags = gabor_magnitudes(img, p)
    h, w = img.shape
    fy, fx = max(h // GIST_GRID, 1), max(w // GIST_GRID, 1)
    return FeatureVector.normalized("gist", block_mean(mags, fy, fx)[..., :GIST_GRID, :GIST_GRID])


def _transitions(code: int) -> int:
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


def _uniform_table() -> np.ndarray:
    table = np.full(256, 58, dtype=np.intp)
    uniform = [c for c in range(256) if _transitions(c) <= 2]
    for i, c in enumerate(uniform):
        table[c] = i
    return table


LBP_TABLE = _uniform_table()
LBP_BINS = 59
# Clockwise ring of (dy, dx) offsets starting at the upper-left neighbour.
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def lbp_codes(img: GrayImage) -> np.ndarray:
    arr = img.data
    p = np.pad(arr, 1, mode="edge")
    h, w = arr.shape
    codes = np.zeros((h, w), dtype=np.intp)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        codes |= (p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] >= arr).astype(np.intp) << bit
    return codes


def lbp_histograms(img: GrayImage, cell: int = LBP_CELL) -> np.ndarray:
    """Per-cell counts of uniform-pattern bins, shape (cells_y, cells_x, 59)."""
    bins = LBP_TABLE[lbp_codes(img)]
    cy, cx = img.height // cell, img.width // cell
    if cy == 0 or cx == 0:
        raise ValidationError(f"image too small for {cell}px LBP cells")
    bins = bins[:cy * cell, :cx * cell].reshape(cy, cell, cx, cell).transpose(0, 2, 1, 3)
    hist = np.zeros((cy, cx, LBP_BINS))
    for b in range(LBP_BINS):
        hist[..., b] = (bins == b).sum(axis=(-2, -1))
    return hist


def extract_lbp(img: GrayImage) -> FeatureVector:
    hist = lbp_histograms(img)
    hist = hist / hist.sum(axis=-1, keepdims=True)
    return FeatureVector.normalized("lbp", hist)


def hog_cells(img: GrayImage, cell: int = HOG_CELL, bins: int = HOG_BINS) -> np.ndarray:
    """Magnitude-weighted unsigned-orientation histograms, shape (cells_y, cells_x, bins)."""
    p = np.pad(img.data, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    idx = np.minimum((ang / (180.0 / bins)).astype(np.intp), bins - 1)
    cy, cx = img.height // cell, img.width // cell
    if cy < 2 or cx < 2:
        raise ValidationError(f"image too small for {cell}px HoG cells with 2x2 blocks")
    mag = mag[:cy * cell, :cx * cell].reshape(cy, cell, cx, cell)
    idx = idx[:cy * cell, :cx * cell].reshape(cy, cell, cx, cell)
    hist = np.zeros((cy, cx, bins))
    for b in range(bins):
        hist[..., b] = np.where(idx == b, mag, 0.0).sum(axis=(1, 3))
    return hist


def extract_hog(img: GrayImage) -> FeatureVector:
    cells = hog_cells(img)
    blocks = np.concatenate([cells[:-1, :-1], cells[:-1, 1:], cells[1:, :-1], cells[1:, 1:]], axis=-1)
    norms = np.sqrt((blocks ** 2).sum(axis=-1, keepdims=True) + HOG_EPS ** 2)
    return FeatureVector.normalized("hog", blocks / norms)


EXTRACTORS = {
    "gabor": extract_gabor,
    "lbp": extract_lbp,
    "hog": extract_hog,
    "gist": extract_gist,
}


def extract(img: GrayImage, kind: str) -> FeatureVector:
    try:
        fn = EXTRACTORS[kind]
    except KeyError:
        raise ValidationError(f"no image extractor for feature kind {kind!r}") from None
    return fn(img)


def cosine_similarity(a: FeatureVector | np.ndarray, b: FeatureVector | np.ndarray) -> float:
    if isinstance(a, FeatureVector) and isinstance(b, FeatureVector) and a.kind != b.kind:
        raise ValidationError(f"cannot compare {a.kind} with {b.kind} features")
    va = a.values if isinstance(a, FeatureVector) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, FeatureVector) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValidationError(f"dimension mismatch {va.size} vs {vb.size}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


# --- feature store: CSV rows of record_id,v1..vd ---------------------------------

def read_feature_table(path: str | Path, kind: str = "external") -> dict[str, FeatureVector]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read feature table ({exc})") from exc
    table: dict[str, FeatureVector] = {}
    dim = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row:
            continue
        if lineno == 1 and row[0] == "record_id":
            continue
        rid, vals = row[0], row[1:]
        try:
            vec = np.array([float(v) for v in vals])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise ValidationError(f"{path}:{lineno}: dimension {vec.size} differs from {dim}")
        if rid in table:
            raise ValidationError(f"{path}:{lineno}: duplicate record {rid!r}")
        table[rid] = FeatureVector.normalized(kind, vec)
    return table


def load_external_embedding(path: str | Path, record_id: str) -> FeatureVector:
    table = read_feature_table(path, "external")
    try:
        return table[record_id]
    except KeyError:
        raise ValidationError(f"{path}: no embedding for record {record_id!r}") from None


def feature_table_text(features: Mapping[str, FeatureVector]) -> str:
    lines = []
    dim = None
    for rid, fv in features.items():
        if dim is None:
            dim = fv.dim
            lines.append(",".join(["record_id"] + [f"v{i + 1}" for i in range(dim)]))
        lines.append(rid + "," + ",".join(map(repr, fv.values.tolist())))
    return "\n".join(lines) + "\n"


def write_feature_table(features: Mapping[str, FeatureVector], path: str | Path) -> None:
    try:
        Path(path).write_text(feature_table_text(features), encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write feature table ({exc})") from exc
