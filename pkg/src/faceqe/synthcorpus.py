"""Deterministic synthetic face-like corpus for dataset-free experiments.

Each subject gets a base pattern in canonical 128x128 crop coordinates: a
band-limited random field plus a fixed "face" layout (dark eye and mouth
blobs at the canonical landmark positions). Each image renders that pattern
through a mild random similarity (so alignment has work to do), then applies
the requested degradations in the order illumination -> blur -> noise.

Seeding is per subject and per image (``[seed, subject]`` and
``[seed, subject, image + 1]``), so output never depends on worker count.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ImageIOError, ValidationError
from .geometry import CROP_SIZE, TEMPLATE_128, SimilarityTransform, bilinear_sample
from .manifest import ManifestRecord, write_manifest
from .raster import GrayImage, gaussian_blur, save_image

DEGRADATION_KINDS = ("blur", "illumination_gradient", "noise", "pose_tag")

# pattern amplitudes are relative to CorpusSpec.base_level
FIELD_CONTRAST = 0.23
FIELD_SIGMA = 3.0
CANVAS_MARGIN = 48


@dataclass(frozen=True)
class Degradation:
    """One corruption applied to every non-clean image.

    ``value`` is the full-strength parameter (sigma for blur/noise, gain
    strength for illumination, radians (roll, pitch, yaw) for pose_tag).
    With ``spread`` s > 0 the per-image strength is ``value * (1 - s*u)``,
    ``u ~ U[0, 1)``; for pose_tag each angle is instead ``value * U[-1, 1)``.
    """

    kind: str
    value: float | tuple[float, float, float]
    spread: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in DEGRADATION_KINDS:
            raise ValidationError(f"unknown degradation {self.kind!r}")
        if not 0.0 <= self.spread <= 1.0:
            raise ValidationError("spread must lie in [0, 1]")
        if self.kind == "pose_tag":
            if len(tuple(self.value)) != 3:
                raise ValidationError("pose_tag needs (roll, pitch, yaw)")
        elif float(self.value) < 0:
            raise ValidationError(f"{self.kind} strength must be non-negative")


def blur(sigma: float, spread: float = 0.0) -> Degradation:
    return Degradation("blur", float(sigma), spread)


def illumination_gradient(strength: float, spread: float = 0.0) -> Degradation:
    return Degradation("illumination_gradient", float(strength), spread)


def noise(sigma: float, spread: float = 0.0) -> Degradation:
    return Degradation("noise", float(sigma), spread)


def pose_tag(roll: float, pitch: float, yaw: float, spread: float = 0.0) -> Degradation:
    return Degradation("pose_tag", (float(roll), float(pitch), float(yaw)), spread)


@dataclass(frozen=True)
class CorpusSpec:
    subjects: int
    images_per_subject: int
    seed: int = 0
    degradations: tuple[Degradation, ...] = ()
    image_size: int = 160
    clean_first: bool = True   # image 0 of every subject is left undegraded
    jitter: bool = True
    base_level: float = 0.30
    variation: float = 0.0     # relative contrast of a fresh per-image nuisance field

    def __post_init__(self) -> None:
        if self.subjects < 2:
            raise ValidationError("a corpus needs at least 2 subjects")
        if self.images_per_subject < 1:
            raise ValidationError("images_per_subject must be >= 1")
        if self.image_size < 64:
            raise ValidationError("image_size must be >= 64")
        if not 0.0 < self.base_level < 1.0 or self.variation < 0:
            raise ValidationError("base_level must lie in (0, 1) and variation be >= 0")
        object.__setattr__(self, "degradations", tuple(self.degradations))


@dataclass
class GeneratedImage:
    record: ManifestRecord
    image: GrayImage
    truth: dict = field(default_factory=dict)
    label: int = 2


def _face_layout(coords_x: np.ndarray, coords_y: np.ndarray) -> np.ndarray:
    eyes = [((TEMPLATE_128[0] + TEMPLATE_128[1]) / 2), ((TEMPLATE_128[2] + TEMPLATE_128[3]) / 2)]
    out = np.zeros_like(coords_x)
    for cx, cy in eyes:
        out -= 0.33 * np.exp(-((coords_x - cx) ** 2 / 60.0 + (coords_y - cy) ** 2 / 20.0))
    mx = (TEMPLATE_128[4, 0] + TEMPLATE_128[5, 0]) / 2
    my = TEMPLATE_128[4, 1]
    out -= 0.27 * np.exp(-((coords_x - mx) ** 2 / 150.0 + (coords_y - my) ** 2 / 12.0))
    # soft oval face boundary
    r = ((coords_x - 64.0) / 52.0) ** 2 + ((coords_y - 70.0) / 64.0) ** 2
    out += 0.17 * (1.0 / (1.0 + np.exp((r - 1.0) * 8.0)))
    return out


def _band_limited(rng: np.random.Generator, n: int) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((n, n)), FIELD_SIGMA, mode="wrap")
    return f / f.std()


def subject_pattern(seed: int, subject: int) -> np.ndarray:
    """Relative base pattern (mean about 1) on a canvas covering the crop plus a
    ``CANVAS_MARGIN`` border; multiply by the base level to get intensities."""
    rng = np.random.default_rng([seed, subject])
    n = CROP_SIZE + 2 * CANVAS_MARGIN
    grid = np.arange(n, dtype=np.float64) - CANVAS_MARGIN
    gx, gy = np.meshgrid(grid, grid)
    return 1.0 + FIELD_CONTRAST * _band_limited(rng, n) + _face_layout(gx, gy)


def illumination_gain(ramp: np.ndarray, strength: float) -> np.ndarray:
    """Multiplicative brightening ramp from 1 (dark edge) to 1 + strength."""
    return 1.0 + strength * ramp


def _strength(d: Degradation, rng: np.random.Generator) -> float:
    u = rng.random()
    return float(d.value) * (1.0 - d.spread * u)


def render_image(spec: CorpusSpec, subject: int, index: int, pattern: np.ndarray) -> GeneratedImage:
    rng = np.random.default_rng([spec.seed, subject, index + 1])
    degrade = not (spec.clean_first and index == 0)
    truth = {"blur_sigma": 0.0, "illumination_strength": 0.0, "illumination_angle": 0.0,
             "noise_sigma": 0.0, "roll": 0.0, "pitch": 0.0, "yaw": 0.0}
    severity = 0.0
    if degrade:
        for d in spec.degradations:
            if d.kind == "pose_tag":
                if d.spread > 0:
                    angles = [v * rng.uniform(-1.0, 1.0) for v in d.value]
                else:
                    angles = list(d.value)
                truth["roll"], truth["pitch"], truth["yaw"] = angles
            else:
                s = _strength(d, rng)
                key = {"blur": "blur_sigma", "illumination_gradient": "illumination_strength",
                       "noise": "noise_sigma"}[d.kind]
                truth[key] = s
                if d.kind == "illumination_gradient":
                    truth["illumination_angle"] = float(rng.uniform(0.0, 2.0 * math.pi))
                if float(d.value) > 0:
                    severity = max(severity, s / float(d.value))
    size = spec.image_size
    # canonical crop -> image: scale, in-plane roll, centring
    if spec.jitter:
        scale = 1.1 * (1.0 + rng.uniform(-0.05, 0.05))
        rot = truth["roll"] + rng.uniform(-0.05, 0.05)
        shift = rng.uniform(-4.0, 4.0, size=2)
    else:
        scale, rot, shift = 1.1, truth["roll"], np.zeros(2)
    c = math.cos(rot)
    s_ = math.sin(rot)
    m = scale * np.array([[c, -s_], [s_, c]])
    t = np.array([size / 2.0, size / 2.0]) + shift - m @ np.array([64.0, 64.0])
    to_image = SimilarityTransform(scale, rot, (float(t[0]), float(t[1])))
    grid = np.arange(size, dtype=np.float64)
    gx, gy = np.meshgrid(grid, grid)
    canon = to_image.inverse().apply(np.stack([gx.ravel(), gy.ravel()], axis=1))
    canvas = pattern
    if spec.variation > 0 and degrade:
        canvas = pattern + spec.variation * _band_limited(rng, pattern.shape[0])
    arr = spec.base_level * bilinear_sample(canvas, canon[:, 0] + CANVAS_MARGIN,
                                            canon[:, 1] + CANVAS_MARGIN).reshape(size, size)
    if truth["illumination_strength"] > 0:
        th = truth["illumination_angle"]
        proj = gx * math.cos(th) + gy * math.sin(th)
        ramp = (proj - proj.min()) / (proj.max() - proj.min())
        arr = arr * illumination_gain(ramp, truth["illumination_strength"])
    img = GrayImage.clipped(arr)
    if truth["blur_sigma"] > 0:
        img = gaussian_blur(img, truth["blur_sigma"])
    if truth["noise_sigma"] > 0:
        img = GrayImage.clipped(img.data + truth["noise_sigma"] * rng.standard_normal(img.shape))
    landmarks = to_image.apply(TEMPLATE_128)
    if not degrade or not spec.degradations:
        label = 2
    else:
        label = 1 if severity <= 0.5 else 0
    rid = f"s{subject:03d}_i{index:02d}"
    pose = (truth["roll"], truth["pitch"], truth["yaw"])
    rec = ManifestRecord(
        record_id=rid,
        image_path=f"images/{rid}.pgm",
        subject_id=f"s{subject:03d}",
        landmarks=tuple((float(x), float(y)) for x, y in landmarks),
        pose=pose,
        split_hint={2: "high", 1: "middle", 0: "low"}[label],
    )
    return GeneratedImage(rec, img, truth, label)


def render_corpus(spec: CorpusSpec, workers: int = 1) -> list[GeneratedImage]:
    def one_subject(subject: int) -> list[GeneratedImage]:
        pattern = subject_pattern(spec.seed, subject)
        return [render_image(spec, subject, i, pattern) for i in range(spec.images_per_subject)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one_subject, range(spec.subjects)))
    else:
        chunks = [one_subject(s) for s in range(spec.subjects)]
    return [g for chunk in chunks for g in chunk]


TRUTH_COLUMNS = ("blur_sigma", "illumination_strength", "illumination_angle", "noise_sigma",
                 "roll", "pitch", "yaw")


def generate(spec: CorpusSpec, out_dir: str | Path, workers: int = 1) -> list[ManifestRecord]:
    """Write images, ``manifest.csv``, ``ground_truth.csv`` and ``labels.csv`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ImageIOError(f"{out}: cannot create corpus directory ({exc})") from exc
    items = render_corpus(spec, workers)
    records = []
    truth = io.StringIO()
    tw = csv.writer(truth, lineterminator="\n")
    tw.writerow(("record_id", "subject_id", "image_index") + TRUTH_COLUMNS)
    labels = io.StringIO()
    lw = csv.writer(labels, lineterminator="\n")
    lw.writerow(("record_id", "label"))
    for g in items:
        save_image(g.image, out / g.record.image_path)
        rec = g.record.with_image(g.record.image_path, out)
        records.append(rec)
        idx = int(rec.record_id.split("_i")[1])
        tw.writerow([rec.record_id, rec.subject_id, idx] + [repr(float(g.truth[k])) for k in TRUTH_COLUMNS])
        lw.writerow([rec.record_id, g.label])
    write_manifest(records, out / "manifest.csv")
    try:
        (out / "ground_truth.csv").write_text(truth.getvalue(), encoding="utf-8")
        (out / "labels.csv").write_text(labels.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{out}: cannot write corpus tables ({exc})") from exc
    return records


def read_labels(path: str | Path) -> dict[str, int]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read labels ({exc})") from exc
    rows = list(csv.DictReader(io.StringIO(text)))
    try:
        return {r["record_id"]: int(r["label"]) for r in rows}
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed labels table ({exc})") from exc


def read_ground_truth(path: str | Path) -> dict[str, dict[str, float]]:
    text = Path(path).read_text(encoding="utf-8")
    return {r["record_id"]: {k: float(r[k]) for k in TRUTH_COLUMNS}
            for r in csv.DictReader(io.StringIO(text))}


def parse_degradations(items: Sequence[str]) -> tuple[Degradation, ...]:
    """Parse CLI specs like ``blur:2``, ``illumination_gradient:0.8:0.5``, ``pose_tag:0.1,0.2,0.3``."""
    out = []
    for item in items:
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ValidationError(f"bad degradation spec {item!r}")
        kind, value = parts[0], parts[1]
        spread = float(parts[2]) if len(parts) == 3 else 0.0
        if kind == "pose_tag":
            angles = tuple(float(v) for v in value.split(","))
            out.append(Degradation(kind, angles, spread))
        else:
            out.append(Degradation(kind, float(value), spread))
    return tuple(out)
