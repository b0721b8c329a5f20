"""Experiment configuration: plain-text ``key = value`` sections.

Sections::

    [experiment]  name, feature, K, gallery, probes, include_absent, subsample_subjects
    [quality]     source = split_hint | model | scores; model / scores / labels paths
    [frontalize]  optional pose pre-selection: thresholds, operator, scope
    [enhance]     optional operator plan: operator, selection, measure, threshold,
                  scope, stage, apply_to, plus operator parameters

Thresholds are either a number or ``mean_of_high_set``; pose thresholds are
``a1`` / ``a2`` / ``a3``, ``mean_of_high_set``, ``deg:r,p,y`` or ``rad:r,p,y``.
Paths are resolved against the config file's directory.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .enhance import OPERATORS, RULES, SCOPES, STAGES, DeblurParams, WeberParams
from .errors import ImageIOError, ValidationError
from .evaluation import DEFAULT_K
from .features import FEATURE_KINDS
from .fiqa import CATEGORIES
from .geometry import EXP_A1, EXP_A2, EXP_A3, PoseThresholds
from .measures import KINDS as MEASURE_KINDS

PRESET_NAMES = ("a1", "a2", "a3", "a4", "b1", "b2", "b3", "b4", "c1", "c2", "c3", "c4")
QUALITY_SOURCES = ("split_hint", "model", "scores")
MEAN_OF_HIGH = "mean_of_high_set"


@dataclass(frozen=True)
class ThresholdSource:
    """A fixed value, or the mean of a measure over the high-quality set."""

    fixed: float | None = None

    @property
    def derived(self) -> bool:
        return self.fixed is None

    @classmethod
    def parse(cls, text: str) -> "ThresholdSource":
        text = text.strip()
        if text == MEAN_OF_HIGH:
            return cls(None)
        try:
            return cls(float(text))
        except ValueError:
            raise ValidationError(f"threshold must be a number or {MEAN_OF_HIGH}, got {text!r}") from None


@dataclass(frozen=True)
class PoseSource:
    thresholds: PoseThresholds | None = None  # None -> mean of |angles| over the high set
    label: str = ""

    @classmethod
    def parse(cls, text: str) -> "PoseSource":
        text = text.strip()
        presets = {"a1": EXP_A1, "a2": EXP_A2, "a3": EXP_A3, "a4": EXP_A3}
        if text in presets:
            return cls(presets[text], text)
        if text == MEAN_OF_HIGH:
            return cls(None, text)
        unit, _, vals = text.partition(":")
        try:
            r, p, y = (float(v) for v in vals.split(","))
        except ValueError:
            raise ValidationError(f"bad pose thresholds {text!r}") from None
        if unit == "deg":
            return cls(PoseThresholds.from_degrees(r, p, y), text)
        if unit == "rad":
            return cls(PoseThresholds(r, p, y), text)
        raise ValidationError(f"pose thresholds need a deg: or rad: prefix, got {text!r}")


@dataclass(frozen=True)
class FrontalizeStage:
    pose: PoseSource
    operator: str = "external"
    scope: str = "selected_plus_remaining"


@dataclass(frozen=True)
class EnhanceStage:
    operator: str
    selection: str = "all"
    measure: str | None = None
    threshold: ThresholdSource | None = None
    scope: str = "selected_plus_remaining"
    stage: str = "after_crop"
    apply_to: str = "probes"   # probes | all (gallery processed too)
    weber: WeberParams = WeberParams()
    deblur: DeblurParams = DeblurParams()


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    feature: str = "gabor"
    K: int = DEFAULT_K
    gallery: str = "high"
    probes: tuple[str, ...] = ("middle", "low")
    include_absent: bool = False
    subsample_subjects: int = 0
    quality_source: str = "split_hint"
    model_path: Path | None = None
    scores_path: Path | None = None
    frontalize: FrontalizeStage | None = None
    enhance: EnhanceStage | None = None
    text: str = field(default="", compare=False, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.text)


def normalized_text(text: str) -> str:
    cp = _parser(text)
    lines = []
    for section in sorted(cp.sections()):
        lines.append(f"[{section}]")
        for key in sorted(cp[section]):
            lines.append(f"{key} = {' '.join(cp[section][key].split())}")
    return "\n".join(lines) + "\n"


def config_hash(text: str) -> str:
    return hashlib.sha256(normalized_text(text).encode("utf-8")).hexdigest()[:16]


def _parser(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    return cp


def _choice(value: str, allowed, what: str) -> str:
    value = value.strip()
    if value not in allowed:
        raise ValidationError(f"{what} must be one of {list(allowed)}, got {value!r}")
    return value


def _path(base: Path, value: str | None) -> Path | None:
    if not value:
        return None
    p = Path(value.strip())
    return p if p.is_absolute() else base / p


def parse_config(text: str, base_dir: Path | str = ".") -> ExperimentConfig:
    base = Path(base_dir)
    cp = _parser(text)
    if "experiment" not in cp:
        raise ValidationError("config needs an [experiment] section")
    ex = cp["experiment"]
    known = {"experiment", "quality", "frontalize", "enhance"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")
    probes = tuple(p.strip() for p in ex.get("probes", "middle, low").split(",") if p.strip())
    gallery = _choice(ex.get("gallery", "high"), CATEGORIES, "gallery")
    for p in probes:
        _choice(p, CATEGORIES, "probe set")
    if gallery in probes:
        raise ValidationError("the gallery set cannot also be a probe set")
    try:
        K = ex.getint("K", DEFAULT_K)
        include_absent = ex.getboolean("include_absent", False)
        subsample = ex.getint("subsample_subjects", 0)
    except ValueError as exc:
        raise ValidationError(f"[experiment]: {exc}") from exc
    if K < 1:
        raise ValidationError("K must be >= 1")

    q = cp["quality"] if "quality" in cp else {}
    source = _choice(q.get("source", "split_hint"), QUALITY_SOURCES, "quality source")
    model_path = _path(base, q.get("model"))
    scores_path = _path(base, q.get("scores"))
    if source == "model" and model_path is None:
        raise ValidationError("[quality] source = model needs a model path")
    if source == "scores" and scores_path is None:
        raise ValidationError("[quality] source = scores needs a scores path")

    front = None
    if "frontalize" in cp:
        f = cp["frontalize"]
        front = FrontalizeStage(
            pose=PoseSource.parse(f.get("thresholds", "a3")),
            operator=_choice(f.get("operator", "external"), ("external", "identity"), "frontalize operator"),
            scope=_choice(f.get("scope", "selected_plus_remaining"), SCOPES, "scope"),
        )

    enh = None
    if "enhance" in cp:
        e = cp["enhance"]
        selection = _choice(e.get("selection", "all"), RULES, "selection")
        if selection == "pose_exceeds":
            raise ValidationError("pose selection belongs in the [frontalize] section")
        measure = e.get("measure")
        threshold = None
        if selection != "all":
            if measure is None:
                raise ValidationError(f"selection {selection} needs a measure")
            measure = _choice(measure, MEASURE_KINDS, "measure")
            threshold = ThresholdSource.parse(e.get("threshold", MEAN_OF_HIGH))
        try:
            weber = WeberParams(alpha=e.getfloat("alpha", 2.0), sigma=e.getfloat("sigma", 1.0))
            deblur = DeblurParams(psf_sigma=e.getfloat("psf_sigma", 1.0),
                                  noise_to_signal=e.getfloat("noise_to_signal", 1e-3))
        except ValueError as exc:
            raise ValidationError(f"[enhance]: {exc}") from exc
        enh = EnhanceStage(
            operator=_choice(e.get("operator", ""), OPERATORS, "operator"),
            selection=selection, measure=measure, threshold=threshold,
            scope=_choice(e.get("scope", "selected_plus_remaining"), SCOPES, "scope"),
            stage=_choice(e.get("stage", "after_crop"), STAGES, "stage"),
            apply_to=_choice(e.get("apply_to", "probes"), ("probes", "all"), "apply_to"),
            weber=weber, deblur=deblur,
        )
    return ExperimentConfig(
        name=ex.get("name", "custom").strip(),
        feature=_choice(ex.get("feature", "gabor"), FEATURE_KINDS, "feature"),
        K=K, gallery=gallery, probes=probes, include_absent=include_absent,
        subsample_subjects=subsample, quality_source=source, model_path=model_path,
        scores_path=scores_path, frontalize=front, enhance=enh, text=text,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read config ({exc})") from exc
    return parse_config(text, path.parent)


def preset_text(name: str) -> str:
    if name not in PRESET_NAMES:
        raise ValidationError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    return resources.files("faceqe").joinpath("presets", f"{name}.ini").read_text(encoding="utf-8")
