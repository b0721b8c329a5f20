"""Enhancement operators and threshold-selection plans.

Operators:
  weberface  illumination-insensitive Weber-face map (display-normalised to [0, 1])
  deblur     Wiener deconvolution with a Gaussian PSF (baseline deblurrer)
  external   substitute the image at the record's ``enhanced_path`` (e.g. an
             externally frontalised or deblurred face)
  identity   mark records as processed without touching pixels

A plan selects records (all / strictly below / strictly above a measure
threshold / pose beyond thresholds), applies the operator to the selected
ones, and decides via ``scope`` whether unselected records still flow to
feature extraction.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .geometry import PoseAngles, PoseThresholds, align_face, pose_exceeds
from .manifest import ManifestRecord
from .raster import GrayImage, convolve2d_raw, gaussian_kernel, load_image

WEBER_EPS = 1.0 / 510.0

OPERATORS = ("weberface", "deblur", "external", "identity")
RULES = ("all", "measure_below", "measure_above", "pose_exceeds")
SCOPES = ("selected_only", "selected_plus_remaining")
STAGES = ("before_crop", "after_crop")


@dataclass(frozen=True)
class WeberParams:
    alpha: float = 2.0
    sigma: float = 1.0
    neighborhood: int = 3  # side length; 3 -> the 9-pixel window

    def __post_init__(self) -> None:
        if not self.alpha > 0 or not self.sigma > 0:
            raise ValidationError("Weber-face alpha and sigma must be positive")
        if self.neighborhood < 3 or self.neighborhood % 2 == 0:
            raise ValidationError("Weber-face neighborhood must be an odd side length >= 3")


@dataclass(frozen=True)
class DeblurParams:
    psf_sigma: float = 1.0
    noise_to_signal: float = 1e-3

    def __post_init__(self) -> None:
        if not self.psf_sigma > 0:
            raise ValidationError("psf_sigma must be positive")
        if not self.noise_to_signal >= 0:
            raise ValidationError("noise_to_signal must be non-negative")


def weberface(img: GrayImage, p: WeberParams = WeberParams(), smooth: bool = True) -> np.ndarray:
    """Weber-face map in (-pi/2, pi/2).

    ``smooth=False`` skips the Gaussian pre-filter (used to check hand-worked values).
    """
    arr = convolve2d_raw(img, gaussian_kernel(p.sigma)) if smooth else img.data
    n = p.neighborhood
    window_sum = ndimage.uniform_filter(arr, size=n, mode="nearest") * (n * n)
    num = n * n * arr - window_sum
    return np.arctan(p.alpha * num / np.maximum(arr, WEBER_EPS))


def weberface_image(img: GrayImage, p: WeberParams = WeberParams(), smooth: bool = True) -> GrayImage:
    w = weberface(img, p, smooth)
    return GrayImage.clipped((w + math.pi / 2) / math.pi)


def _psf_otf(shape: tuple[int, int], sigma: float) -> np.ndarray:
    taps = gaussian_kernel(sigma).taps
    r = taps.shape[0] // 2
    psf = np.zeros(shape)
    psf[:taps.shape[0], :taps.shape[1]] = taps
    psf = np.roll(psf, (-r, -r), axis=(0, 1))
    return np.fft.fft2(psf)


def wiener_deblur_raw(img: GrayImage, p: DeblurParams = DeblurParams()) -> np.ndarray:
    r = gaussian_kernel(p.psf_sigma).size // 2
    pad = 2 * r + 2
    padded = np.pad(img.data, pad, mode="edge")
    h = _psf_otf(padded.shape, p.psf_sigma)
    spec = np.fft.fft2(padded) * np.conj(h) / (np.abs(h) ** 2 + p.noise_to_signal)
    return np.real(np.fft.ifft2(spec))[pad:-pad, pad:-pad]


def wiener_deblur(img: GrayImage, p: DeblurParams = DeblurParams()) -> GrayImage:
    return GrayImage.clipped(wiener_deblur_raw(img, p))


@dataclass(frozen=True)
class Selection:
    rule: str = "all"
    measure: str | None = None
    threshold: float | None = None
    pose: PoseThresholds | None = None

    def __post_init__(self) -> None:
        if self.rule not in RULES:
            raise ValidationError(f"unknown selection rule {self.rule!r}")
        if self.rule in ("measure_below", "measure_above"):
            if self.measure is None or self.threshold is None or not math.isfinite(self.threshold):
                raise ValidationError(f"{self.rule} needs a measure and a finite threshold")
        if self.rule == "pose_exceeds" and self.pose is None:
            raise ValidationError("pose_exceeds selection needs pose thresholds")

    def picks(self, record: ManifestRecord, measures: Mapping[str, Mapping[str, float]] | None) -> bool:
        if self.rule == "all":
            return True
        if self.rule == "pose_exceeds":
            return pose_exceeds(PoseAngles.from_record(record), self.pose)
        row = (measures or {}).get(record.record_id)
        if row is None or self.measure not in row:
            raise ValidationError(f"record {record.record_id} has no {self.measure} measure")
        v = float(row[self.measure])
        return v < self.threshold if self.rule == "measure_below" else v > self.threshold


@dataclass(frozen=True)
class EnhancementPlan:
    operator: str
    selection: Selection = Selection()
    scope: str = "selected_plus_remaining"
    stage: str = "after_crop"
    weber: WeberParams = WeberParams()
    deblur: DeblurParams = DeblurParams()

    def __post_init__(self) -> None:
        if self.operator not in OPERATORS:
            raise ValidationError(f"unknown operator {self.operator!r}")
        if self.scope not in SCOPES:
            raise ValidationError(f"unknown scope {self.scope!r}")
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}")


@dataclass(frozen=True)
class EnhancedEntry:
    record: ManifestRecord
    selected: bool
    frontalized: bool

    @property
    def set_label(self) -> str:
        if not self.selected:
            return "set3"
        return "set1" if self.frontalized else "set2"


@dataclass
class EnhancedSet:
    plan: EnhancementPlan
    entries: list[EnhancedEntry]
    images: dict[str, GrayImage] = field(default_factory=dict)

    @property
    def selected(self) -> list[ManifestRecord]:
        return [e.record for e in self.entries if e.selected]

    @property
    def remaining(self) -> list[ManifestRecord]:
        return [e.record for e in self.entries if not e.selected]

    @property
    def feature_records(self) -> list[ManifestRecord]:
        """Records that flow on to feature extraction under the plan's scope."""
        if self.plan.scope == "selected_only":
            return self.selected
        return [e.record for e in self.entries]

    def counts(self) -> dict[str, int]:
        c = {"set1": 0, "set2": 0, "set3": 0}
        for e in self.entries:
            c[e.set_label] += 1
        return c


def default_crop(record: ManifestRecord, img: GrayImage) -> GrayImage:
    return align_face(img, record.landmarks)


def apply_operator(plan: EnhancementPlan, img: GrayImage) -> GrayImage:
    if plan.operator == "weberface":
        return weberface_image(img, plan.weber)
    if plan.operator == "deblur":
        return wiener_deblur(img, plan.deblur)
    return img


def enhance_one(record: ManifestRecord, plan: EnhancementPlan, selected: bool,
                load: Callable[[ManifestRecord], GrayImage],
                crop: Callable[[ManifestRecord, GrayImage], GrayImage]) -> GrayImage:
    """Produce the face crop for one record, enhanced when it is selected."""
    if selected and plan.operator == "external":
        path = record.enhanced_file
        if path is None:
            raise ValidationError(f"record {record.record_id}: operator=external needs an enhanced_path")
        return align_face(load_image(path), None)
    img = load(record)
    if not selected:
        return crop(record, img)
    if plan.stage == "before_crop":
        return crop(record, apply_operator(plan, img))
    return apply_operator(plan, crop(record, img))


def apply_plan(records: Sequence[ManifestRecord], plan: EnhancementPlan,
               measures: Mapping[str, Mapping[str, float]] | None = None, *,
               frontalized: set[str] | None = None,
               load: Callable[[ManifestRecord], GrayImage] | None = None,
               crop: Callable[[ManifestRecord, GrayImage], GrayImage] | None = None,
               with_images: bool = True, workers: int = 1) -> EnhancedSet:
    """Select, label and (optionally) enhance ``records``.

    ``frontalized`` names records flagged by an earlier pose-selection pass;
    selected records split into set1 (also frontalised) and set2, the rest
    are set3. Selection is settled before any image work so the outcome does
    not depend on ``workers``.
    """
    frontalized = frontalized or set()
    entries = [EnhancedEntry(r, plan.selection.picks(r, measures), r.record_id in frontalized)
               for r in records]
    if plan.operator == "external":
        for e in entries:
            if e.selected and not e.record.enhanced_path:
                raise ValidationError(f"record {e.record.record_id}: operator=external needs an enhanced_path")
    out = EnhancedSet(plan, entries)
    if not with_images:
        return out
    load = load or (lambda r: load_image(r.image_file))
    crop = crop or default_crop
    flowing = [e for e in entries if e.selected or plan.scope == "selected_plus_remaining"]

    def work(e: EnhancedEntry) -> GrayImage:
        return enhance_one(e.record, plan, e.selected, load, crop)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            imgs = list(pool.map(work, flowing))
    else:
        imgs = [work(e) for e in flowing]
    out.images = {e.record.record_id: im for e, im in zip(flowing, imgs)}
    return out


def table2_rows(label: str, counts_by_quality: Mapping[str, Mapping[str, int]]) -> list[list[str]]:
    """Rows of a set1/set2/set3/total table, one per quality set."""
    rows = []
    for quality, c in counts_by_quality.items():
        total = c["set1"] + c["set2"] + c["set3"]
        rows.append([label, quality, str(c["set1"]), str(c["set2"]), str(c["set3"]), str(total)])
    return rows
