"""Dataset manifest: one CSV row per face image.

Columns (header row required, UTF-8)::

    record_id,image_path,subject_id,landmarks,roll,pitch,yaw,enhanced_path,embedding_ref,split_hint

``landmarks`` holds 6 or 68 ``x,y`` pairs separated by ``;``; pose angles are
radians. Only the first three columns are mandatory. Relative paths resolve
against the manifest's directory.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ImageIOError, ValidationError

COLUMNS = ("record_id", "image_path", "subject_id", "landmarks", "roll", "pitch", "yaw",
           "enhanced_path", "embedding_ref", "split_hint")
REQUIRED = COLUMNS[:3]


@dataclass(frozen=True)
class ManifestRecord:
    record_id: str
    image_path: str
    subject_id: str
    landmarks: tuple[tuple[float, float], ...] | None = None
    pose: tuple[float, float, float] | None = None  # (roll, pitch, yaw) radians
    enhanced_path: str | None = None
    embedding_ref: str | None = None
    split_hint: str | None = None
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def image_file(self) -> Path:
        return self.resolve(self.image_path)

    @property
    def enhanced_file(self) -> Path | None:
        return None if not self.enhanced_path else self.resolve(self.enhanced_path)

    def with_image(self, image_path: str, base_dir: Path | None = None) -> "ManifestRecord":
        return replace(self, image_path=image_path, base_dir=base_dir or self.base_dir)


def parse_landmarks(text: str) -> tuple[tuple[float, float], ...] | None:
    text = text.strip()
    if not text:
        return None
    pts = []
    for chunk in text.split(";"):
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ValidationError(f"bad landmark pair {chunk!r}")
        pts.append((float(parts[0]), float(parts[1])))
    if len(pts) not in (6, 68):
        raise ValidationError(f"expected 6 or 68 landmarks, got {len(pts)}")
    return tuple(pts)


def format_landmarks(pts: Sequence[tuple[float, float]] | None) -> str:
    if not pts:
        return ""
    return ";".join(f"{x!r},{y!r}" for x, y in pts)


def _opt(row: dict, key: str) -> str | None:
    v = (row.get(key) or "").strip()
    return v or None


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read manifest ({exc})") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise ValidationError(f"{path}: manifest is empty")
    missing = [c for c in REQUIRED if c not in reader.fieldnames]
    if missing:
        raise ValidationError(f"{path}: manifest missing columns {missing}")
    records = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        try:
            rid = row["record_id"].strip()
            if not rid:
                raise ValidationError("empty record_id")
            if rid in seen:
                raise ValidationError(f"duplicate record_id {rid!r}")
            seen.add(rid)
            angles = [_opt(row, k) for k in ("roll", "pitch", "yaw")]
            if all(a is None for a in angles):
                pose = None
            elif any(a is None for a in angles):
                raise ValidationError("pose needs all of roll, pitch, yaw")
            else:
                pose = tuple(float(a) for a in angles)
            records.append(ManifestRecord(
                record_id=rid,
                image_path=row["image_path"].strip(),
                subject_id=row["subject_id"].strip(),
                landmarks=parse_landmarks(row.get("landmarks") or ""),
                pose=pose,
                enhanced_path=_opt(row, "enhanced_path"),
                embedding_ref=_opt(row, "embedding_ref"),
                split_hint=_opt(row, "split_hint"),
                base_dir=path.parent,
            ))
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        raise ValidationError(f"{path}: manifest has no records")
    return records


def manifest_text(records: Iterable[ManifestRecord], base_dir: Path | None = None) -> str:
    """Serialise records; paths are rewritten relative to ``base_dir`` when given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        def rel(p: str | None) -> str:
            if not p:
                return ""
            if base_dir is None:
                return p
            full = r.resolve(p)
            try:
                return full.resolve().relative_to(base_dir.resolve()).as_posix()
            except ValueError:
                return str(full.resolve())
        pose = ("", "", "") if r.pose is None else tuple(repr(float(a)) for a in r.pose)
        w.writerow([r.record_id, rel(r.image_path), r.subject_id, format_landmarks(r.landmarks),
                    *pose, rel(r.enhanced_path), rel(r.embedding_ref), r.split_hint or ""])
    return buf.getvalue()


def write_manifest(records: Iterable[ManifestRecord], path: str | Path) -> None:
    path = Path(path)
    try:
        path.write_text(manifest_text(records, base_dir=path.parent), encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write manifest ({exc})") from exc


def validate_paths(records: Iterable[ManifestRecord]) -> None:
    for r in records:
        if not r.image_file.is_file():
            raise ImageIOError(f"record {r.record_id}: image not found at {r.image_file}")
