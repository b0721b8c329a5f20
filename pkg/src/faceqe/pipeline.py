"""Experiment orchestration: assess -> partition -> (frontalize) -> (enhance)
-> extract -> match -> CMC -> compare, written out as a deterministic bundle.

Bundles contain only text derived from inputs and config (no timestamps, no
absolute output paths), so reruns are byte-identical for any worker count.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

from . import fiqa
from .config import ExperimentConfig, normalized_text
from .enhance import EnhancedSet, EnhancementPlan, Selection, apply_plan
from .errors import FaceQEError, ImageIOError, StageError, ValidationError
from .evaluation import (CmcCurve, CmcDelta, build_gallery, cmc, cmc_svg, compare_runs,
                         set_summary, subsample_subjects)
from .features import FeatureVector, extract, read_feature_table
from .geometry import PoseThresholds, align_face
from .manifest import ManifestRecord
from .measures import KINDS as MEASURE_KINDS, measure_all, set_mean
from .raster import GrayImage, load_image

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Order-preserving map; results never depend on ``workers``."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def load_raw(record: ManifestRecord) -> GrayImage:
    return load_image(record.image_file)


def crop_records(records: Sequence[ManifestRecord], workers: int = 1) -> dict[str, GrayImage]:
    imgs = parallel_map(lambda r: align_face(load_raw(r), r.landmarks), records, workers)
    return {r.record_id: im for r, im in zip(records, imgs)}


def _embedding_tables(records: Iterable[ManifestRecord]) -> dict[Path, dict[str, FeatureVector]]:
    tables: dict[Path, dict[str, FeatureVector]] = {}
    for r in records:
        if not r.embedding_ref:
            raise ValidationError(f"record {r.record_id} has no embedding_ref for external features")
        p = r.resolve(r.embedding_ref)
        if p not in tables:
            tables[p] = read_feature_table(p, "external")
    return tables


def extract_features(records: Sequence[ManifestRecord], images: Mapping[str, GrayImage], kind: str,
                     workers: int = 1) -> dict[str, FeatureVector]:
    if kind == "external":
        tables = _embedding_tables(records)
        out = {}
        for r in records:
            table = tables[r.resolve(r.embedding_ref)]
            if r.record_id not in table:
                raise ValidationError(f"no embedding row for record {r.record_id!r}")
            out[r.record_id] = table[r.record_id]
        return out
    vecs = parallel_map(lambda r: extract(images[r.record_id], kind), records, workers)
    return {r.record_id: v for r, v in zip(records, vecs)}


def measure_images(records: Sequence[ManifestRecord], images: Mapping[str, GrayImage],
                   workers: int = 1) -> dict[str, dict[str, float]]:
    vals = parallel_map(lambda r: measure_all(images[r.record_id]), records, workers)
    return {r.record_id: v for r, v in zip(records, vals)}


def measures_csv(table: Mapping[str, Mapping[str, float]]) -> str:
    lines = ["record_id," + ",".join(MEASURE_KINDS)]
    for rid, row in table.items():
        lines.append(rid + "," + ",".join(repr(float(row[k])) for k in MEASURE_KINDS))
    return "\n".join(lines) + "\n"


def read_measures(path: str | Path) -> dict[str, dict[str, float]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read measures ({exc})") from exc
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        rid = row.pop("record_id")
        out[rid] = {k: float(v) for k, v in row.items() if v not in (None, "")}
    return out


QUALITY_KINDS = ("hog", "gabor", "gist", "lbp")


def quality_features(records: Sequence[ManifestRecord], images: Mapping[str, GrayImage],
                     kinds: Iterable[str] = QUALITY_KINDS, workers: int = 1) -> dict[str, dict[str, FeatureVector]]:
    return {k: extract_features(records, images, k, workers) for k in kinds}


def assess(records: Sequence[ManifestRecord], model: fiqa.QualityModel, images: Mapping[str, GrayImage] | None = None,
           workers: int = 1) -> dict[str, int]:
    if not records:
        raise ValidationError("nothing to assess: manifest is empty")
    images = images if images is not None else crop_records(records, workers)
    feats = quality_features(records, images, model.kinds, workers)
    return {r.record_id: fiqa.predict_quality(model, {k: feats[k][r.record_id] for k in model.kinds})
            for r in records}


def scores_csv(scores: Mapping[str, int]) -> str:
    lines = ["record_id,score,category"]
    lines += [f"{rid},{s},{fiqa.categorize(s)}" for rid, s in scores.items()]
    return "\n".join(lines) + "\n"


def read_scores(path: str | Path) -> dict[str, int]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read scores ({exc})") from exc
    try:
        return {row["record_id"]: int(row["score"]) for row in csv.DictReader(io.StringIO(text))}
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed scores table ({exc})") from exc


def partition_records(records: Sequence[ManifestRecord], scores: Mapping[str, int]) -> dict[str, list[ManifestRecord]]:
    missing = [r.record_id for r in records if r.record_id not in scores]
    if missing:
        raise ValidationError(f"{len(missing)} records have no quality score, e.g. {missing[0]!r}")
    ids = fiqa.partition({r.record_id: scores[r.record_id] for r in records})
    by_id = {r.record_id: r for r in records}
    return {c: [by_id[i] for i in ids[c]] for c in fiqa.CATEGORIES}


def partition_by_hint(records: Sequence[ManifestRecord]) -> dict[str, list[ManifestRecord]]:
    sets: dict[str, list[ManifestRecord]] = {c: [] for c in fiqa.CATEGORIES}
    for r in records:
        if r.split_hint not in sets:
            raise ValidationError(f"record {r.record_id}: split_hint {r.split_hint!r} is not one of {fiqa.CATEGORIES}")
        sets[r.split_hint].append(r)
    return sets


def table1_text(sets: Mapping[str, Sequence[ManifestRecord]]) -> str:
    rows = set_summary(sets)
    lines = ["set,subjects,images"] + [f"{n},{s},{i}" for n, s, i in rows]
    return "\n".join(lines) + "\n"


def enhanced_csv(es: EnhancedSet, outputs: Mapping[str, str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["record_id", "set_label", "selected", "frontalized", "operator", "output_path"])
    for e in es.entries:
        w.writerow([e.record.record_id, e.set_label, int(e.selected), int(e.frontalized),
                    es.plan.operator if e.selected else "none", (outputs or {}).get(e.record.record_id, "")])
    return buf.getvalue()


@dataclass
class ProbeResult:
    name: str
    before: CmcCurve
    after: CmcCurve
    delta: CmcDelta
    counts: dict[str, int] = field(default_factory=dict)


@dataclass
class RunResult:
    config: ExperimentConfig
    files: dict[str, str]
    sets: dict[str, list[ManifestRecord]]
    thresholds: dict[str, float]
    probes: dict[str, ProbeResult]

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            for name, text in self.files.items():
                (out / name).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ImageIOError(f"{out}: cannot write bundle ({exc})") from exc


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, (FaceQEError, OSError, ValueError, KeyError)) \
                and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def run_experiment(cfg: ExperimentConfig, records: Sequence[ManifestRecord], workers: int = 1) -> RunResult:
    files: dict[str, str] = {}
    thresholds: dict[str, float] = {}
    threshold_notes: list[str] = []

    with _Stage("assess"):
        if not records:
            raise ValidationError("manifest is empty")
        if cfg.quality_source == "model":
            model = fiqa.load_model(cfg.model_path)
            crops = crop_records(records, workers)
            scores = assess(records, model, crops, workers)
            files["scores.csv"] = scores_csv(scores)
        elif cfg.quality_source == "scores":
            scores = read_scores(cfg.scores_path)
            crops = None
        else:
            scores = None
            crops = None

    with _Stage("partition"):
        sets = partition_records(records, scores) if scores is not None else partition_by_hint(records)
        files["partition.csv"] = "record_id,subject_id,category\n" + "".join(
            f"{r.record_id},{r.subject_id},{c}\n" for c in fiqa.CATEGORIES for r in sets[c])
        files["table1.csv"] = table1_text(sets)
        gallery_recs = sets[cfg.gallery]
        if not gallery_recs:
            raise ValidationError(f"gallery set {cfg.gallery!r} is empty")
        for p in cfg.probes:
            if not sets[p]:
                raise ValidationError(f"probe set {p!r} is empty")

    with _Stage("crop"):
        needed = list(gallery_recs) + [r for p in cfg.probes for r in sets[p]]
        if crops is None:
            crops = crop_records(needed, workers)
        base = {r.record_id: crops[r.record_id] for r in needed}

    results: dict[str, ProbeResult] = {}
    table2: list[list[str]] = []
    measures_rows: dict[str, dict[str, float]] = {}
    enhanced_rows: list[str] = []

    with _Stage("frontalize"):
        front_th = None
        if cfg.frontalize is not None:
            front_th = cfg.frontalize.pose.thresholds
            if front_th is None:
                front_th = PoseThresholds.mean_abs(gallery_recs)
            thresholds.update({"frontalize.roll": front_th.roll_max, "frontalize.pitch": front_th.pitch_max,
                               "frontalize.yaw": front_th.yaw_max})
            threshold_notes.append(f"frontalize: {cfg.frontalize.pose.label}")

    stage_in: dict[str, dict[str, GrayImage]] = {}
    flowing: dict[str, list[ManifestRecord]] = {}
    frontal_ids: dict[str, set[str]] = {}
    for p in cfg.probes:
        with _Stage(f"frontalize:{p}"):
            if cfg.frontalize is None:
                stage_in[p] = {r.record_id: base[r.record_id] for r in sets[p]}
                flowing[p] = list(sets[p])
                frontal_ids[p] = set()
                continue
            plan = EnhancementPlan(cfg.frontalize.operator, Selection("pose_exceeds", pose=front_th),
                                   scope=cfg.frontalize.scope)
            es = apply_plan(sets[p], plan, load=load_raw, workers=workers)
            stage_in[p] = es.images
            flowing[p] = es.feature_records
            frontal_ids[p] = {r.record_id for r in es.selected}
            if cfg.enhance is None:
                c = es.counts()
                table2.append([cfg.name, p, str(c["set1"] + c["set2"]), "0", str(c["set3"]), str(len(es.entries))])
                enhanced_rows.append(enhanced_csv(es))

    gallery_after = {r.record_id: base[r.record_id] for r in gallery_recs}
    if cfg.enhance is not None:
        e = cfg.enhance
        with _Stage("measure"):
            gallery_measures = measure_images(gallery_recs, base, workers)
            measures_rows.update(gallery_measures)
            threshold = None
            if e.selection != "all":
                if e.threshold.derived:
                    threshold = set_mean([gallery_measures[r.record_id][e.measure] for r in gallery_recs])
                    threshold_notes.append(f"enhance.{e.measure}: mean_of_high_set over {len(gallery_recs)} images")
                else:
                    threshold = e.threshold.fixed
                    threshold_notes.append(f"enhance.{e.measure}: fixed")
                thresholds[f"enhance.{e.measure}"] = threshold
        plan = EnhancementPlan(e.operator, Selection(e.selection, e.measure, threshold), e.scope, e.stage,
                               e.weber, e.deblur)
        chained = cfg.frontalize is not None

        def loader_for(images: Mapping[str, GrayImage]):
            if chained:
                return (lambda r: images[r.record_id]), (lambda r, img: img)
            return load_raw, (lambda r, img: align_face(img, r.landmarks))

        for p in cfg.probes:
            with _Stage(f"enhance:{p}"):
                recs = flowing[p]
                m = measure_images(recs, stage_in[p], workers)
                measures_rows.update(m)
                load, crop = loader_for(stage_in[p])
                es = apply_plan(recs, plan, m, frontalized=frontal_ids[p], load=load, crop=crop, workers=workers)
                c = es.counts()
                if c["set1"] + c["set2"] + c["set3"] != len(recs):
                    raise ValidationError("enhancement sets do not add up to the input count")
                table2.append([cfg.name, p, str(c["set1"]), str(c["set2"]), str(c["set3"]), str(len(recs))])
                stage_in[p] = es.images
                flowing[p] = es.feature_records
                enhanced_rows.append(enhanced_csv(es))
        if e.apply_to == "all":
            with _Stage("enhance:gallery"):
                es = apply_plan(gallery_recs, plan, gallery_measures, load=load_raw,
                                crop=lambda r, img: align_face(img, r.landmarks), workers=workers)
                gallery_after = {r.record_id: es.images[r.record_id] for r in es.feature_records}
        files["measures.csv"] = measures_csv(measures_rows)
    gallery_recs_after = [r for r in gallery_recs if r.record_id in gallery_after]
    gallery_changed = any(gallery_after[r.record_id] is not base[r.record_id] for r in gallery_recs_after) \
        or len(gallery_recs_after) != len(gallery_recs)

    if cfg.feature == "external" and (cfg.enhance or cfg.frontalize):
        threshold_notes.append("feature external: after vectors come from the same embedding tables")
    with _Stage("extract"):
        g_before = extract_features(gallery_recs, base, cfg.feature, workers)
        g_after = extract_features(gallery_recs_after, gallery_after, cfg.feature, workers) \
            if gallery_changed else g_before
        gal_before = build_gallery(gallery_recs, g_before)
        gal_after = build_gallery(gallery_recs_after, g_after)

    for p in cfg.probes:
        with _Stage(f"match:{p}"):
            before_recs = list(sets[p])
            after_recs = list(flowing[p])
            if cfg.subsample_subjects > 0:
                before_recs = subsample_subjects(before_recs, cfg.subsample_subjects)
                after_recs = subsample_subjects(after_recs, cfg.subsample_subjects)
            if not after_recs:
                raise ValidationError(f"no {p} records remain after enhancement selection")
            fb = extract_features(before_recs, base, cfg.feature, workers)
            fa = extract_features(after_recs, stage_in[p], cfg.feature, workers)
            before = cmc([(r.subject_id, fb[r.record_id]) for r in before_recs], gal_before, cfg.K,
                         cfg.include_absent, label=f"{p} vs {cfg.gallery} (before)")
            after = cmc([(r.subject_id, fa[r.record_id]) for r in after_recs], gal_after, cfg.K,
                        cfg.include_absent, label=f"{p} vs {cfg.gallery} (after {cfg.name})")
            delta = compare_runs(before, after)
            results[p] = ProbeResult(p, before, after, delta,
                                     {"before": len(before_recs), "after": len(after_recs)})
            files[f"cmc_{p}_before.csv"] = before.to_csv()
            files[f"cmc_{p}_after.csv"] = after.to_csv()
            files[f"delta_{p}.csv"] = delta.to_csv()
            files[f"cmc_{p}.svg"] = cmc_svg([before, after], title=f"{cfg.name}: {p} vs {cfg.gallery}")

    if table2:
        files["table2.csv"] = "experiment,quality,set1,set2,set3,total\n" + "".join(",".join(r) + "\n" for r in table2)
    if enhanced_rows:
        files["enhanced.csv"] = enhanced_rows[0] + "".join(t.split("\n", 1)[1] for t in enhanced_rows[1:])
    files["run_manifest.txt"] = _run_manifest(cfg, sets, thresholds, threshold_notes, table2, results)
    return RunResult(cfg, dict(sorted(files.items())), sets, thresholds, results)


def _run_manifest(cfg: ExperimentConfig, sets, thresholds, notes, table2, results) -> str:
    lines = [
        "faceqe run manifest v1",
        f"name = {cfg.name}",
        f"config_hash = {cfg.config_hash}",
        f"feature = {cfg.feature}",
        f"K = {cfg.K}",
        "aggregation = max cosine similarity over each gallery subject's images",
        "tie_break = ascending subject_id",
        f"include_absent = {str(cfg.include_absent).lower()}",
        f"quality_source = {cfg.quality_source}",
        f"gallery = {cfg.gallery}",
        f"probes = {','.join(cfg.probes)}",
        "intensity_scale = [0,1]",
        "",
        "[sets]",
        "set,subjects,images",
    ]
    lines += [f"{n},{s},{i}" for n, s, i in set_summary(sets)]
    lines += ["", "[thresholds]"]
    lines += [f"{k} = {v!r}" for k, v in sorted(thresholds.items())]
    lines += [f"# {n}" for n in notes]
    if table2:
        lines += ["", "[enhancement]", "experiment,quality,set1,set2,set3,total"] + [",".join(r) for r in table2]
    lines += ["", "[results]", "probe,images_before,absent_before,rank1_before,images_after,absent_after,rank1_after,delta_rank1"]
    for p, r in results.items():
        lines.append(f"{p},{r.before.n_probes},{r.before.n_absent},{r.before.rate(1)!r},"
                     f"{r.after.n_probes},{r.after.n_absent},{r.after.rate(1)!r},{r.delta.rank1_delta!r}")
    lines += ["", "[config]", normalized_text(cfg.text).rstrip("\n")]
    return "\n".join(lines) + "\n"
