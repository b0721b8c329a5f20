"""``faceqe`` command-line front end.

Every subcommand reads plain files and writes CSV / SVG / text outputs; the
process exit code is 0 on success and the error class's code otherwise
(2 validation, 3 I/O, 4 numeric).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import fiqa, pipeline
from .config import PRESET_NAMES, ExperimentConfig, load_config, parse_config, preset_text
from .enhance import EnhancementPlan, Selection, apply_plan
from .errors import FaceQEError, ImageIOError, ValidationError
from .evaluation import DEFAULT_K, build_gallery, cmc, cmc_svg, match_probe, ranking_csv
from .features import FEATURE_KINDS, feature_table_text, read_feature_table
from .manifest import ManifestRecord, manifest_text, read_manifest, validate_paths
from .measures import set_mean
from .raster import save_image
from .synthcorpus import CorpusSpec, generate, parse_degradations, read_labels


def _write(path: str | Path, text: str) -> None:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{p}: cannot write ({exc})") from exc


def _emit(out: str | None, text: str) -> None:
    if out:
        _write(out, text)
    else:
        sys.stdout.write(text)


def _manifest(args) -> list[ManifestRecord]:
    records = read_manifest(args.manifest)
    if not records:
        raise ValidationError(f"{args.manifest}: manifest has no records")
    validate_paths(records)
    return records


def _sets(records: Sequence[ManifestRecord], scores_path: str | None) -> dict[str, list[ManifestRecord]]:
    if scores_path:
        return pipeline.partition_records(records, pipeline.read_scores(scores_path))
    return pipeline.partition_by_hint(records)


def _subset(args, records: list[ManifestRecord]) -> list[ManifestRecord]:
    if not getattr(args, "set", None):
        return records
    chosen = _sets(records, getattr(args, "scores", None))[args.set]
    if not chosen:
        raise ValidationError(f"set {args.set!r} is empty")
    return chosen


def _config(ref: str) -> ExperimentConfig:
    if ref in PRESET_NAMES:
        return parse_config(preset_text(ref))
    return load_config(ref)


# --- subcommands -----------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    spec = CorpusSpec(args.subjects, args.images, args.seed, parse_degradations(args.degrade),
                      image_size=args.size, base_level=args.base_level, variation=args.variation)
    records = generate(spec, args.out, args.workers)
    print(f"wrote {len(records)} images for {spec.subjects} subjects to {args.out}")
    return 0


def cmd_assess(args) -> int:
    records = _manifest(args)
    model = fiqa.load_model(args.model)
    scores = pipeline.assess(records, model, workers=args.workers)
    _emit(args.out, pipeline.scores_csv(scores))
    return 0


def cmd_partition(args) -> int:
    records = _manifest(args)
    sets = _sets(records, args.scores)
    out = Path(args.out)
    names = [args.set] if args.set else list(sets)
    for name in names:
        _write(out / f"{name}.csv", manifest_text(sets[name], out))
    sys.stdout.write(pipeline.table1_text(sets))
    return 0


def cmd_measure(args) -> int:
    records = _subset(args, _manifest(args))
    crops = pipeline.crop_records(records, args.workers)
    _emit(args.out, pipeline.measures_csv(pipeline.measure_images(records, crops, args.workers)))
    return 0


def cmd_enhance(args) -> int:
    cfg = _config(args.config)
    if cfg.enhance is None:
        raise ValidationError("config has no [enhance] section")
    e = cfg.enhance
    records = _subset(args, _manifest(args))
    measures = pipeline.read_measures(args.measures) if args.measures else None
    threshold = None
    if e.selection != "all":
        if measures is None:
            raise ValidationError(f"selection {e.selection} needs --measures")
        if e.threshold.derived:
            every = _manifest(args)
            high = _sets(every, args.scores)["high"]
            missing = [r.record_id for r in high if r.record_id not in measures]
            if not high or missing:
                raise ValidationError("mean_of_high_set needs measures for a non-empty high set")
            threshold = set_mean([measures[r.record_id][e.measure] for r in high])
        else:
            threshold = e.threshold.fixed
    plan = EnhancementPlan(e.operator, Selection(e.selection, e.measure, threshold), e.scope, e.stage,
                           e.weber, e.deblur)
    es = apply_plan(records, plan, measures, workers=args.workers)
    out = Path(args.out)
    outputs = {}
    enhanced_records = []
    for r in es.feature_records:
        rel = f"enhanced/{r.record_id}.pgm"
        save_image(es.images[r.record_id], out / rel)
        outputs[r.record_id] = rel
        # the saved crop is already aligned, so landmarks no longer apply
        enhanced_records.append(replace(r, image_path=str((out / rel).resolve()), landmarks=None,
                                        enhanced_path=None))
    _write(out / "enhanced_manifest.csv", manifest_text(enhanced_records, out))
    _write(out / "enhanced.csv", pipeline.enhanced_csv(es, outputs))
    c = es.counts()
    total = c["set1"] + c["set2"] + c["set3"]
    if total != len(records):
        raise ValidationError("set1 + set2 + set3 does not equal the input count")
    table = ("experiment,set1,set2,set3,total\n"
             f"{cfg.name},{c['set1']},{c['set2']},{c['set3']},{total}\n")
    if threshold is not None:
        table += f"# threshold {e.measure} = {threshold!r}\n"
    _write(out / "table2.csv", table)
    sys.stdout.write(table)
    return 0


def cmd_features(args) -> int:
    records = _subset(args, _manifest(args))
    crops = None if args.kind == "external" else pipeline.crop_records(records, args.workers)
    feats = pipeline.extract_features(records, crops, args.kind, args.workers)
    _emit(args.out, feature_table_text(feats))
    return 0


def cmd_train_fiqa(args) -> int:
    records = _manifest(args)
    labels = read_labels(args.labels)
    records = [r for r in records if r.record_id in labels]
    if len(records) < 2:
        raise ValidationError("need at least two labelled records to train")
    crops = pipeline.crop_records(records, args.workers)
    feats = pipeline.quality_features(records, crops, workers=args.workers)
    if args.external:
        feats["external"] = pipeline.extract_features(records, crops, "external")
    model = fiqa.train_quality_model({r.record_id: labels[r.record_id] for r in records}, feats,
                                     reg_lambda=args.reg_lambda, iters=args.iters, seed=args.seed,
                                     max_pairs=args.max_pairs)
    fiqa.save_model(model, args.out)
    print(f"trained {len(model.kinds)} level-1 rankers ({','.join(model.kinds)}) on {len(records)} records")
    return 0


def _gallery_and_probes(args):
    records = _manifest(args)
    sets = _sets(records, args.scores)
    gallery, probes = sets[args.gallery], sets[args.set]
    if not gallery or not probes:
        raise ValidationError(f"gallery {args.gallery!r} or probe set {args.set!r} is empty")
    feats = read_feature_table(args.features, args.kind)
    for r in list(gallery) + list(probes):
        if r.record_id not in feats:
            raise ValidationError(f"{args.features}: no features for {r.record_id!r}")
    return build_gallery(gallery, feats), probes, feats


def cmd_match(args) -> int:
    g, probes, feats = _gallery_and_probes(args)
    rows = [(r.record_id, r.subject_id, match_probe(feats[r.record_id], g)) for r in probes]
    _emit(args.out, ranking_csv(rows, args.top))
    return 0


def cmd_cmc(args) -> int:
    g, probes, feats = _gallery_and_probes(args)
    curve = cmc([(r.subject_id, feats[r.record_id]) for r in probes], g, args.K, args.include_absent,
                label=f"{args.set} vs {args.gallery}")
    out = Path(args.out)
    _write(out / f"cmc_{args.set}.csv", curve.to_csv())
    _write(out / f"cmc_{args.set}.svg", cmc_svg([curve], title=curve.label))
    print(f"rank-1 {curve.rate(1):.4f} over {curve.n_probes} probes ({curve.n_absent} not enrolled)")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args.config)
    records = _manifest(args)
    result = pipeline.run_experiment(cfg, records, args.workers)
    result.write(args.out)
    for p, r in result.probes.items():
        print(f"{cfg.name} {p}: rank-1 {r.before.rate(1):.4f} -> {r.after.rate(1):.4f}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="faceqe", description="Face image quality assessment and enhancement toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, manifest=True, out_required=False):
        p = sub.add_parser(name, help=help_)
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest CSV")
        p.add_argument("--out", required=out_required, help="output file or directory")
        p.add_argument("--workers", type=int, default=1, help="parallel workers (never changes outputs)")
        p.set_defaults(func=fn)
        return p

    def add_set(p, required=False):
        p.add_argument("--set", choices=fiqa.CATEGORIES, required=required, help="restrict to one quality set")
        p.add_argument("--scores", help="quality scores CSV (default: the manifest's split_hint)")

    p = add("gen-corpus", cmd_gen_corpus, "write a synthetic corpus", manifest=False, out_required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--images", type=int, default=3, help="images per subject")
    p.add_argument("--degrade", action="append", default=[],
                   help="kind:value[:spread], e.g. blur:2, illumination_gradient:4:0.5, pose_tag:0.3,0.2,0.4")
    p.add_argument("--size", type=int, default=160)
    p.add_argument("--base-level", type=float, default=0.30)
    p.add_argument("--variation", type=float, default=0.0)

    p = add("assess", cmd_assess, "score image quality with a trained model")
    p.add_argument("--model", required=True)

    p = add("partition", cmd_partition, "split a manifest into low/middle/high sets", out_required=True)
    add_set(p)

    p = add("measure", cmd_measure, "compute edge density, sharpness, spectral energy")
    add_set(p)

    p = add("enhance", cmd_enhance, "apply an enhancement plan", out_required=True)
    p.add_argument("--config", required=True, help="config file or preset name")
    p.add_argument("--measures", help="measures CSV from 'measure'")
    add_set(p)

    p = add("features", cmd_features, "extract a feature table")
    p.add_argument("--kind", choices=FEATURE_KINDS, default="gabor")
    add_set(p)

    p = add("train-fiqa", cmd_train_fiqa, "train the two-level quality model", out_required=True)
    p.add_argument("--labels", required=True, help="record_id,label CSV (larger label = better quality)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=fiqa.DEFAULT_ITERS)
    p.add_argument("--reg-lambda", type=float, default=fiqa.DEFAULT_LAMBDA)
    p.add_argument("--max-pairs", type=int, default=fiqa.MAX_PAIRS)
    p.add_argument("--external", action="store_true", help="also train on the manifest's embedding tables")

    for name, fn, help_ in (("match", cmd_match, "rank gallery subjects for each probe"),
                            ("cmc", cmd_cmc, "CMC curve of a probe set against the gallery")):
        p = add(name, fn, help_, out_required=(name == "cmc"))
        p.add_argument("--features", required=True, help="feature table CSV from 'features'")
        p.add_argument("--kind", choices=FEATURE_KINDS, default="gabor")
        p.add_argument("--gallery", choices=fiqa.CATEGORIES, default="high")
        add_set(p, required=True)
        if name == "match":
            p.add_argument("--top", type=int, default=10)
        else:
            p.add_argument("--K", type=int, default=DEFAULT_K)
            p.add_argument("--include-absent", action="store_true")

    p = add("run", cmd_run, "run a full experiment and write a report bundle", out_required=True)
    p.add_argument("--config", required=True, help=f"config file or preset ({', '.join(PRESET_NAMES)})")
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; runs are seed-free")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return ValidationError.exit_code
    try:
        return args.func(args)
    except FaceQEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
