"""Closed-set gallery/probe identification and CMC curves.

A probe's score against a subject is the maximum cosine similarity over that
subject's gallery vectors. Subjects are ranked by descending score with ties
broken by ascending subject id, so every ranking is total and repeatable.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ValidationError
from .features import FeatureVector
from .manifest import ManifestRecord

DEFAULT_K = 50


@dataclass
class GalleryIndex:
    subjects: list[str]
    matrix: np.ndarray        # (n_vectors, dim), rows L2-normalised
    owner: np.ndarray         # subject index for each row
    kind: str

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.subjects)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise NumericError("zero feature vector cannot be matched")
    return v / n


def build_gallery(records: Sequence[ManifestRecord], features: Mapping[str, FeatureVector]) -> GalleryIndex:
    if not records:
        raise ValidationError("gallery set is empty")
    seen = set()
    for r in records:
        if r.record_id in seen:
            raise ValidationError(f"duplicate gallery record {r.record_id!r}")
        seen.add(r.record_id)
        if r.record_id not in features:
            raise ValidationError(f"no features for gallery record {r.record_id!r}")
    kinds = {features[r.record_id].kind for r in records}
    if len(kinds) != 1:
        raise ValidationError(f"gallery mixes feature kinds {sorted(kinds)}")
    subjects = sorted({r.subject_id for r in records})
    pos = {s: i for i, s in enumerate(subjects)}
    rows = sorted(records, key=lambda r: (r.subject_id, r.record_id))
    matrix = np.stack([_unit(features[r.record_id].values) for r in rows])
    owner = np.array([pos[r.subject_id] for r in rows], dtype=np.intp)
    return GalleryIndex(subjects, matrix, owner, kinds.pop())


def subject_scores(probe: FeatureVector, g: GalleryIndex) -> np.ndarray:
    if probe.kind != g.kind or probe.dim != g.dim:
        raise ValidationError(f"probe {probe.kind}/{probe.dim} does not match gallery {g.kind}/{g.dim}")
    sims = g.matrix @ _unit(probe.values)
    best = np.full(len(g.subjects), -np.inf)
    np.maximum.at(best, g.owner, sims)
    return best


def _order(scores: np.ndarray) -> np.ndarray:
    # subjects are stored sorted, so a stable sort on -score breaks ties by id
    return np.argsort(-scores, kind="stable")


def match_probe(probe: FeatureVector, g: GalleryIndex) -> list[tuple[str, float]]:
    scores = subject_scores(probe, g)
    return [(g.subjects[i], float(scores[i])) for i in _order(scores)]


@dataclass
class CmcCurve:
    rates: np.ndarray          # rates[k-1] = rank-k identification rate
    n_probes: int
    n_absent: int = 0          # probes whose subject is not enrolled
    include_absent: bool = False
    label: str = ""

    def __post_init__(self) -> None:
        r = np.asarray(self.rates, dtype=np.float64)
        if np.any(np.diff(r) < 0):
            raise NumericError("CMC curve is not monotone")
        self.rates = r

    @property
    def K(self) -> int:
        return self.rates.size

    def rate(self, k: int) -> float:
        return float(self.rates[k - 1])

    def to_csv(self) -> str:
        lines = ["rank,rate"] + [f"{k},{float(self.rates[k - 1])!r}" for k in range(1, self.K + 1)]
        return "\n".join(lines) + "\n"


def rank_of_subjects(probes: Sequence[tuple[str, FeatureVector]], g: GalleryIndex) -> list[int | None]:
    """1-based rank of each probe's true subject, or None when it is not enrolled."""
    pos = {s: i for i, s in enumerate(g.subjects)}
    out: list[int | None] = []
    for subject, vec in probes:
        if subject not in pos:
            out.append(None)
            continue
        order = _order(subject_scores(vec, g))
        out.append(int(np.nonzero(order == pos[subject])[0][0]) + 1)
    return out


def cmc(probes: Sequence[tuple[str, FeatureVector]], g: GalleryIndex, K: int = DEFAULT_K,
        include_absent: bool = False, label: str = "") -> CmcCurve:
    """Closed-set CMC; ``include_absent`` counts unenrolled probes as never retrieved."""
    if not probes:
        raise ValidationError("probe set is empty")
    if K < 1:
        raise ValidationError("K must be >= 1")
    ranks = rank_of_subjects(probes, g)
    n_absent = sum(r is None for r in ranks)
    found = np.array([r for r in ranks if r is not None], dtype=np.intp)
    denom = len(ranks) if include_absent else len(found)
    if denom == 0:
        raise ValidationError("no probe subject is enrolled in the gallery")
    hits = np.bincount(np.minimum(found, K + 1), minlength=K + 2)[1:K + 1]
    rates = np.cumsum(hits) / denom
    return CmcCurve(rates, len(ranks), n_absent, include_absent, label)


@dataclass
class CmcDelta:
    before: CmcCurve
    after: CmcCurve
    deltas: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.before.K != self.after.K:
            raise ValidationError(f"K mismatch: {self.before.K} vs {self.after.K}")
        self.deltas = self.after.rates - self.before.rates

    @property
    def rank1_delta(self) -> float:
        return float(self.deltas[0])

    def to_csv(self) -> str:
        lines = ["rank,before,after,delta"]
        for k in range(self.before.K):
            lines.append(f"{k + 1},{float(self.before.rates[k])!r},{float(self.after.rates[k])!r},{float(self.deltas[k])!r}")
        return "\n".join(lines) + "\n"


def compare_runs(before: CmcCurve, after: CmcCurve) -> CmcDelta:
    return CmcDelta(before, after)


def subsample_subjects(records: Sequence[ManifestRecord], n: int) -> list[ManifestRecord]:
    """Keep records of the first ``n`` subjects in lexicographic id order."""
    keep = set(sorted({r.subject_id for r in records})[:n])
    return [r for r in records if r.subject_id in keep]


def set_summary(sets: Mapping[str, Iterable[ManifestRecord]]) -> list[tuple[str, int, int]]:
    """(set name, #subjects, #images) rows, as in a quality-distribution table."""
    rows = []
    for name, recs in sets.items():
        recs = list(recs)
        rows.append((name, len({r.subject_id for r in recs}), len(recs)))
    return rows


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def cmc_svg(curves: Sequence[CmcCurve], title: str = "", width: int = 480, height: int = 360) -> str:
    """Standalone SVG line plot of one or more CMC curves (rank on x, rate on y)."""
    if not curves:
        raise ValidationError("nothing to plot")
    left, right, top, bottom = 56, 16, 32, 48
    pw, ph = width - left - right, height - top - bottom
    K = max(c.K for c in curves)

    def px(k: float) -> float:
        return left + (0.0 if K == 1 else (k - 1) / (K - 1) * pw)

    def py(r: float) -> float:
        return top + (1.0 - r) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for i in range(11):
        r = i / 10
        out.append(f'<line x1="{left - 4}" y1="{py(r):.2f}" x2="{left}" y2="{py(r):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{py(r) + 4:.2f}" text-anchor="end">{r:.1f}</text>')
    step = max(1, K // 10)
    for k in sorted(set(list(range(1, K + 1, step)) + [K])):
        out.append(f'<line x1="{px(k):.2f}" y1="{top + ph}" x2="{px(k):.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(k):.2f}" y="{top + ph + 16}" text-anchor="middle">{k}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">Rank</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">Identification rate</text>')
    for i, c in enumerate(curves):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(k):.2f},{py(c.rates[k - 1]):.2f}" for k in range(1, c.K + 1))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 14 * i
        out.append(f'<line x1="{left + pw - 130}" y1="{ly}" x2="{left + pw - 110}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 104}" y="{ly + 4}">{_esc(c.label or f"curve {i + 1}")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def ranking_csv(rows: Sequence[tuple[str, str, list[tuple[str, float]]]], top: int) -> str:
    """probe_id,true_subject,rank,subject_id,score rows for the top ``top`` candidates."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["probe_id", "true_subject", "rank", "subject_id", "score"])
    for pid, subject, ranking in rows:
        for k, (sid, score) in enumerate(ranking[:top], start=1):
            w.writerow([pid, subject, k, sid, repr(score)])
    return buf.getvalue()
