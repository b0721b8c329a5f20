"""Landmarks, similarity alignment/cropping and pose-threshold selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ValidationError
from .manifest import ManifestRecord
from .raster import GrayImage

CROP_SIZE = 128

# iBUG-68 indices: left-eye outer/inner, right-eye inner/outer, mouth left/right.
SIX_POINT_INDICES = (36, 39, 42, 45, 48, 54)

# Canonical 6-point layout for a 128x128 crop.
TEMPLATE_128 = np.array([
    [40.96, 48.0], [54.4, 48.0], [73.6, 48.0], [87.04, 48.0],
    [46.08, 89.6], [81.92, 89.6],
])


def six_from_68(points: Sequence[Sequence[float]]) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (68, 2):
        raise ValidationError(f"expected 68 landmarks, got array of shape {pts.shape}")
    return pts[list(SIX_POINT_INDICES)].copy()


def as_six(points: Sequence[Sequence[float]]) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape == (6, 2):
        return pts.copy()
    return six_from_68(pts)


def template_for(size: int = CROP_SIZE) -> np.ndarray:
    return TEMPLATE_128 * (size / CROP_SIZE)


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps ``p`` to ``scale * R(rotation) @ p + translation`` (x right, y down)."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T + np.asarray(self.translation)

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        r = inv_scale * np.array([[c, -s], [s, c]])
        t = -(r @ np.asarray(self.translation))
        return SimilarityTransform(inv_scale, -self.rotation, (float(t[0]), float(t[1])))


def estimate_similarity(src: np.ndarray, template: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity (no reflection) taking ``src`` onto ``template``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(template, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValidationError(f"point sets must both be (n, 2), got {src.shape} and {dst.shape}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    sc, dc = src - mu_s, dst - mu_d
    var_s = float((sc ** 2).sum() / len(src))
    if var_s <= 1e-12:
        raise NumericError("source landmarks are coincident; similarity is undefined")
    cov = dc.T @ sc / len(src)
    u, d, vt = np.linalg.svd(cov)
    fix = np.diag([1.0, np.sign(np.linalg.det(u) * np.linalg.det(vt)) or 1.0])
    rot = u @ fix @ vt
    scale = float(np.trace(np.diag(d) @ fix) / var_s)
    if not scale > 0:
        raise NumericError("degenerate landmark correspondence")
    t = mu_d - scale * rot @ mu_s
    angle = math.atan2(rot[1, 0], rot[0, 0])
    return SimilarityTransform(scale, angle, (float(t[0]), float(t[1])))


def bilinear_sample(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at (xs, ys); coordinates outside the grid clamp to the edge."""
    h, w = arr.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = arr[y0, x0] * (1.0 - fx) + arr[y0, x1] * fx
    bot = arr[y1, x0] * (1.0 - fx) + arr[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def warp_crop(img: GrayImage, t: SimilarityTransform, out_size: int = CROP_SIZE) -> GrayImage:
    """Sample the ``out_size`` square whose pixel ``q`` comes from source point ``t^-1(q)``."""
    if out_size < 1:
        raise ValidationError(f"out_size must be positive, got {out_size}")
    grid = np.arange(out_size, dtype=np.float64)
    gx, gy = np.meshgrid(grid, grid)
    src = t.inverse().apply(np.stack([gx.ravel(), gy.ravel()], axis=1))
    out = bilinear_sample(img.data, src[:, 0], src[:, 1]).reshape(out_size, out_size)
    return GrayImage.clipped(out)


def align_face(img: GrayImage, landmarks: Sequence[Sequence[float]] | None,
               out_size: int = CROP_SIZE) -> GrayImage:
    """Align and crop using 6 (or 68) landmarks; without landmarks, rescale the whole image."""
    if landmarks is None:
        if img.shape == (out_size, out_size):
            return img
        sx = out_size / img.width
        sy = out_size / img.height
        grid = np.arange(out_size, dtype=np.float64)
        xs = (grid + 0.5) / sx - 0.5
        ys = (grid + 0.5) / sy - 0.5
        gx, gy = np.meshgrid(xs, ys)
        return GrayImage.clipped(bilinear_sample(img.data, gx, gy))
    t = estimate_similarity(as_six(landmarks), template_for(out_size))
    return warp_crop(img, t, out_size)


@dataclass(frozen=True)
class PoseAngles:
    roll: float
    pitch: float
    yaw: float

    def __post_init__(self) -> None:
        for name in ("roll", "pitch", "yaw"):
            v = getattr(self, name)
            if not -math.pi <= v <= math.pi:
                raise ValidationError(f"{name}={v} outside [-pi, pi]")

    @classmethod
    def from_record(cls, r: ManifestRecord) -> "PoseAngles":
        if r.pose is None:
            raise ValidationError(f"record {r.record_id} carries no pose angles")
        return cls(*r.pose)


@dataclass(frozen=True)
class PoseThresholds:
    roll_max: float
    pitch_max: float
    yaw_max: float

    def __post_init__(self) -> None:
        if min(self.roll_max, self.pitch_max, self.yaw_max) <= 0:
            raise ValidationError("pose thresholds must be positive")

    @classmethod
    def from_degrees(cls, roll: float, pitch: float, yaw: float) -> "PoseThresholds":
        return cls(math.radians(roll), math.radians(pitch), math.radians(yaw))

    @classmethod
    def mean_abs(cls, records: Iterable[ManifestRecord]) -> "PoseThresholds":
        """Per-angle mean of absolute values, e.g. over the high-quality set."""
        angles = [PoseAngles.from_record(r) for r in records]
        if not angles:
            raise ValidationError("cannot derive pose thresholds from an empty set")
        m = np.abs([(a.roll, a.pitch, a.yaw) for a in angles]).mean(axis=0)
        return cls(float(m[0]), float(m[1]), float(m[2]))


EXP_A1 = PoseThresholds.from_degrees(30, 30, 30)
EXP_A2 = PoseThresholds(roll_max=0.0947, pitch_max=0.1263, yaw_max=0.1432)
EXP_A3 = PoseThresholds.from_degrees(roll=45, pitch=25, yaw=15)


def pose_exceeds(p: PoseAngles, t: PoseThresholds) -> bool:
    return abs(p.roll) > t.roll_max or abs(p.pitch) > t.pitch_max or abs(p.yaw) > t.yaw_max


def select_for_frontalization(records: Sequence[ManifestRecord], t: PoseThresholds
                              ) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
    selected, remaining = [], []
    for r in records:
        (selected if pose_exceeds(PoseAngles.from_record(r), t) else remaining).append(r)
    return selected, remaining
