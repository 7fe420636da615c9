"""Command-line entry point: ``taxoprior <subcommand>``.

Exit codes: 0 success, 1 domain or validation failure, 2 usage error.
Human-readable output goes to stdout, diagnostics to stderr, and
machine-readable reports to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import fixtures
from .errors import TaxopriorError
from .manifest import (
    DatasetManifest,
    load_manifest,
    load_manifest_set,
    pair_frames,
    render_stats,
    stats,
    subsample,
)
from .metrics import ConfusionMatrix, EvalReport, comparison, format_report
from .ontology import (
    ConstraintTable,
    FallbackPolicy,
    build_constraint_table,
    load_ontology,
    read_ontology_header,
    validate_ontology,
)
from .refine import RefineConfig, RefineReport, refine_image, refine_image_with_scores
from .simulator import SceneSpec, TeacherNoise, run_experiment, run_trial, write_triptych
from .taxonomy import Taxonomy, load_taxonomy
from .tensorio import (
    SCALES,
    AugDescriptor,
    default_augmentations,
    read_labelmap,
    read_soft,
    write_colorized,
    write_labelmap,
    write_soft,
)

log = logging.getLogger("taxoprior")
SCHEMA = 1


class UsageError(Exception):
    pass


def dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (value >= 0 and value != float("inf")):
        raise argparse.ArgumentTypeError(f"must be finite and >= 0, got {text}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return value


def _scales(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated scales, got {text!r}") from None


def taxonomy_registry(paths: list[str] | None) -> dict[str, Taxonomy]:
    reg = fixtures.bundled_taxonomies()
    for p in paths or ():
        tax = load_taxonomy(p)
        reg[tax.name] = tax
    return reg


def _lookup(reg: dict[str, Taxonomy], name: str) -> Taxonomy:
    try:
        return reg[name]
    except KeyError:
        raise TaxopriorError(f"unknown taxonomy {name!r}; pass its file with --taxonomy") from None


# -- validate --------------------------------------------------------------------------

def cmd_validate(args) -> int:
    reg = taxonomy_registry(args.taxonomy)
    extra_name, source_name = read_ontology_header(args.ontology)
    rel = load_ontology(args.ontology, _lookup(reg, extra_name), _lookup(reg, source_name), strict=False)
    diags = validate_ontology(rel)
    for d in diags:
        print(d.format(), file=sys.stderr)
    errors = sum(d.severity == "error" for d in diags)
    warnings = len(diags) - errors
    failed = errors > 0 or (args.strict and warnings > 0)
    status = "FAILED" if failed else "ok"
    print(f"{status}: {args.ontology}: {errors} error(s), {warnings} warning(s)")
    return 1 if failed else 0


# -- refine ------------------------------------------------------------------------------

@dataclass(frozen=True)
class _RefineJob:
    frame_id: str
    gt: Path
    predictions: tuple[Path, ...]
    augs: tuple[AugDescriptor, ...]


@dataclass(frozen=True)
class _RefineContext:
    extra: Taxonomy
    source: Taxonomy
    table: ConstraintTable
    cfg: RefineConfig
    labels_dir: Path
    reports_dir: Path
    colorize: bool
    soft: bool
    allow_any_scale: bool


def _refine_one(job: _RefineJob, ctx: _RefineContext) -> tuple[str, dict | None, str | None]:
    try:
        gt = read_labelmap(job.gt, ctx.extra)
        preds = []
        for path, expected in zip(job.predictions, job.augs):
            pred, desc = read_soft(path, ctx.allow_any_scale)
            if (desc.hflip, desc.scale) != (expected.hflip, expected.scale):
                raise TaxopriorError(f"{path.name}: header describes {desc.name}, expected {expected.name}")
            preds.append((pred, desc))
        if ctx.soft:
            labels, report, masked = refine_image_with_scores(preds, gt, ctx.table, ctx.cfg)
        else:
            labels, report = refine_image(preds, gt, ctx.table, ctx.cfg)
        write_labelmap(labels, ctx.labels_dir / f"{job.frame_id}.png")
        if ctx.colorize:
            (ctx.labels_dir / "color").mkdir(exist_ok=True)
            write_colorized(labels, ctx.source, ctx.labels_dir / "color" / f"{job.frame_id}.png")
        if ctx.soft:
            (ctx.labels_dir / "soft").mkdir(exist_ok=True)
            write_soft(masked, AugDescriptor(), ctx.labels_dir / "soft" / f"{job.frame_id}.sftp")
        body = report.to_json()
        body["frame"] = job.frame_id
        dump_json(body, ctx.reports_dir / f"{job.frame_id}.json")
        return job.frame_id, body, None
    except (TaxopriorError, ValueError, OSError) as exc:
        return job.frame_id, None, str(exc)


def _report_from_json(body: dict) -> RefineReport:
    return RefineReport(
        pixels_total=body["pixels_total"],
        pixels_constrained=body["pixels_constrained"],
        pixels_fallback=body["pixels_fallback"],
        pixels_changed_by_mask=body["pixels_changed_by_mask"],
        histogram={int(k): v for k, v in body["histogram"].items()},
    )


def iteration_workspace(root: Path, iteration: int) -> dict[str, Path]:
    """Create ``it<i>/{predictions,pseudo-labels,reports}``; iterations must be consecutive."""
    if iteration < 1:
        raise UsageError("iteration must be >= 1")
    if iteration > 1 and not (root / f"it{iteration - 1}").is_dir():
        raise TaxopriorError(f"iteration {iteration} requires workspace {root / f'it{iteration - 1}'}")
    base = root / f"it{iteration}"
    dirs = {k: base / k for k in ("predictions", "pseudo-labels", "reports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def cmd_refine(args) -> int:
    reg = taxonomy_registry(args.taxonomy)
    manifest: DatasetManifest = load_manifest(args.manifest)
    ont_path = Path(args.ontology) if args.ontology else None
    if ont_path is None:
        if manifest.ontology is None:
            raise TaxopriorError(f"dataset {manifest.name!r} declares no ontology; pass --ontology")
        ont_path = manifest.resolve(manifest.ontology)
        bundled = fixtures.data_path("ontologies", manifest.ontology)
        if not ont_path.is_file() and bundled.is_file():
            ont_path = bundled
    extra_name, source_name = read_ontology_header(ont_path)
    if extra_name != manifest.taxonomy:
        raise TaxopriorError(
            f"ontology maps from {extra_name!r} but dataset {manifest.name!r} uses taxonomy {manifest.taxonomy!r}")
    extra, source = _lookup(reg, extra_name), _lookup(reg, source_name)
    rel = load_ontology(ont_path, extra, source)
    table = build_constraint_table(rel)
    fallback = FallbackPolicy.parse(args.fallback) if args.fallback else rel.default_fallback
    cfg = RefineConfig(fallback=fallback, renormalize_output=args.soft)

    dirs = iteration_workspace(Path(args.output), args.iteration)
    pred_root = Path(args.predictions) if args.predictions else dirs["predictions"]
    if manifest.sampling_step > 1:
        manifest = subsample(manifest, manifest.sampling_step)
    scales = args.scales or list(SCALES)
    augs = default_augmentations(scales, flip=not args.no_flip)
    for a in augs:
        a.validate(args.allow_any_scale)
    pairing = pair_frames(manifest, pred_root, augs)
    jobs = [_RefineJob(p.frame_id, p.gt, p.predictions, p.augmentations) for p in pairing]
    ctx = _RefineContext(extra, source, table, cfg, dirs["pseudo-labels"], dirs["reports"],
                         args.colorize, args.soft, args.allow_any_scale)

    failures: dict[str, str] = {fid: "missing " + ", ".join(miss) for fid, miss in pairing.incomplete.items()}
    results: dict[str, dict] = {}
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(_refine_one, jobs, [ctx] * len(jobs)))
    else:
        outcomes = [_refine_one(j, ctx) for j in jobs]
    for fid, body, error in outcomes:
        if error is not None:
            failures[fid] = error
        else:
            results[fid] = body

    for fid in sorted(failures):
        print(f"frame {fid}: {failures[fid]}", file=sys.stderr)
    merged = RefineReport.merge(_report_from_json(results[f]) for f in sorted(results))
    aggregate = merged.to_json()
    aggregate.pop("fallback_pixels")
    aggregate.update({
        "dataset": manifest.name,
        "iteration": args.iteration,
        "fallback_policy": cfg.fallback.value,
        "frames_total": len(manifest.frames),
        "frames_ok": len(results),
        "frames_failed": len(failures),
        "failures": [{"frame": f, "error": failures[f]} for f in sorted(failures)],
    })
    dump_json(aggregate, dirs["reports"] / "aggregate.json")
    print(
        f"refined {len(results)}/{len(manifest.frames)} frame(s) of {manifest.name}: "
        f"{aggregate['fraction_constrained']:.4f} constrained, {aggregate['fraction_fallback']:.4f} fallback, "
        f"{aggregate['fraction_changed']:.4f} changed by mask"
    )
    return 1 if failures and not args.keep_going else 0


# -- evaluate ------------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    reg = taxonomy_registry(args.taxonomy)
    pred_m, gt_m = load_manifest(args.pred_manifest), load_manifest(args.gt_manifest)
    if pred_m.taxonomy != gt_m.taxonomy:
        raise TaxopriorError(f"taxonomy mismatch: {pred_m.taxonomy!r} vs {gt_m.taxonomy!r}")
    tax = _lookup(reg, gt_m.taxonomy)
    pred_by_id = {f.id: f for f in pred_m.frames}
    gt_ids = [f.id for f in gt_m.frames]
    missing = [f for f in gt_ids if f not in pred_by_id]
    extra = sorted(set(pred_by_id) - set(gt_ids))
    if missing or extra:
        raise TaxopriorError(
            f"frame pairing mismatch: {len(missing)} ground-truth frame(s) without prediction "
            f"{missing[:5]}, {len(extra)} prediction(s) without ground truth {extra[:5]}")
    cm = ConfusionMatrix(len(tax))
    for frame in gt_m.frames:
        gt = read_labelmap(gt_m.resolve(frame.gt), tax)
        pred = read_labelmap(pred_m.resolve(pred_by_id[frame.id].gt), tax)
        cm.update(pred, gt)
    report = EvalReport.from_matrix(cm, tax)
    init = None
    if args.baseline:
        base = json.loads(Path(args.baseline).read_text(encoding="utf-8"))
        init = float(base["miou"])
    sys.stdout.write(format_report(report, args.model, args.iteration, init))
    body = report.to_json()
    summary = comparison(report.miou, init)
    body.update({
        "model": args.model,
        "iteration": args.iteration,
        "post": float(summary["post"]),
        "init": float(summary["init"]) if init is not None else None,
        "diff": float(summary["diff"]) if init is not None else None,
    })
    for path in _json_targets(args, "evaluation.json"):
        dump_json(body, path)
    return 0


def _json_targets(args, default_name: str) -> list[Path]:
    out = []
    if args.json:
        out.append(Path(args.json))
    if args.output:
        out.append(Path(args.output) / default_name)
    return out


# -- simulate -----------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    reg = taxonomy_registry(args.taxonomy)
    ont_path = Path(args.ontology) if args.ontology else fixtures.data_path("ontologies", "sim.ont")
    extra_name, source_name = read_ontology_header(ont_path)
    rel = load_ontology(ont_path, _lookup(reg, extra_name), _lookup(reg, source_name))
    fine = rel.source
    confusions = []
    for spec in args.confuse or ():
        parts = spec.split(":")
        if len(parts) != 3:
            raise UsageError(f"--confuse expects a:b:gamma, got {spec!r}")
        a, b = fine.get(parts[0]), fine.get(parts[1])
        if a is None or b is None:
            raise UsageError(f"--confuse {spec!r}: unknown class in taxonomy {fine.name!r}")
        try:
            gamma = _non_negative_float(parts[2])
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"--confuse {spec!r}: {exc}") from None
        confusions.append((a, b, gamma))
    try:
        scene = SceneSpec(args.height, args.width, args.cells, fine, args.seed)
        noise = TeacherNoise(args.beta, args.sigma, tuple(confusions), args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = RefineConfig(fallback=FallbackPolicy.parse(args.fallback) if args.fallback else rel.default_fallback)
    report = run_experiment(scene, noise, rel, cfg, args.trials)
    print(f"trials: {args.trials}  seed: {args.seed}")
    print(f"accuracy unconstrained: {report.accuracy_unconstrained:.6f}")
    print(f"accuracy constrained:   {report.accuracy_constrained:.6f}")
    print(f"pixels fixed: {report.fixed}  pixels broken: {report.introduced}")
    for path in _json_targets(args, "simulation.json"):
        dump_json(report.to_json(), path)
    if args.triptych:
        out = Path(args.triptych)
        out.mkdir(parents=True, exist_ok=True)
        table = build_constraint_table(rel)
        for i in range(args.trials):
            _, f, p, c = run_trial(scene, noise, rel, cfg, i, table)
            write_triptych(f, p, c, fine, out / f"trial-{i:03d}.png")
    return 0


# -- stats ----------------------------------------------------------------------------------

BUNDLED_TABLES = ("urban", "offroad")


def cmd_stats(args) -> int:
    tables = []
    paths = args.manifests or [fixtures.data_path("tables", f"{n}.manifestset") for n in BUNDLED_TABLES]
    for path in paths:
        ms = load_manifest_set(path)
        if ms.datasets:
            tables.append(stats(ms.datasets, ms.title))
    sys.stdout.write(render_stats(tables))
    for path in _json_targets(args, "stats.json"):
        dump_json({"schema": SCHEMA, "tables": [t.to_json() for t in tables]}, path)
    return 0


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=_positive_int, default=argparse.SUPPRESS,
                        help="worker processes (default: available CPUs)")
    common.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS)
    common.add_argument("--output", default=argparse.SUPPRESS, help="output root directory")
    common.add_argument("--taxonomy", action="append", default=argparse.SUPPRESS, metavar="PATH",
                        help="extra taxonomy file (repeatable); bundled taxonomies are always available")

    parser = argparse.ArgumentParser(prog="taxoprior", parents=[common],
                                     description="Ontology-constrained pseudo-labels for semantic segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="check an ontology against its taxonomies")
    p.add_argument("ontology")
    p.add_argument("--strict", action="store_true", help="treat warnings as errors")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("refine", parents=[common], help="turn teacher predictions into pseudo-labels")
    p.add_argument("manifest")
    p.add_argument("--predictions", help="prediction root (default: <output>/it<i>/predictions)")
    p.add_argument("--ontology", help="override the manifest's ontology")
    p.add_argument("--iteration", type=_positive_int, default=1)
    p.add_argument("--fallback", choices=[f.value for f in FallbackPolicy])
    p.add_argument("--scales", type=_scales, help="comma-separated scales (default: all seven)")
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--allow-any-scale", action="store_true")
    p.add_argument("--colorize", action="store_true")
    p.add_argument("--soft", action="store_true", help="also export renormalized masked scores")
    p.add_argument("--keep-going", action="store_true", help="exit 0 even if some frames failed")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", parents=[common], help="IoU / mIoU of predictions against ground truth")
    p.add_argument("pred_manifest")
    p.add_argument("gt_manifest")
    p.add_argument("--baseline", help="earlier evaluation JSON whose mIoU is the initial value")
    p.add_argument("--model", default="-")
    p.add_argument("--iteration", default="-")
    p.add_argument("--json", help="write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", parents=[common], help="synthetic check of constraint masking")
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--trials", type=_positive_int, default=1)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--cells", type=int, default=12)
    p.add_argument("--beta", type=_non_negative_float, default=2.0)
    p.add_argument("--sigma", type=_non_negative_float, default=1.0)
    p.add_argument("--confuse", action="append", metavar="A:B:GAMMA",
                   help="boost class B's logit by GAMMA wherever the truth is A (repeatable)")
    p.add_argument("--ontology", help="partition ontology (default: bundled sim.ont)")
    p.add_argument("--fallback", choices=[f.value for f in FallbackPolicy])
    p.add_argument("--triptych", metavar="DIR", help="write fine/unconstrained/constrained PNGs")
    p.add_argument("--json", help="write the JSON report here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stats", parents=[common], help="frame statistics of manifest sets")
    p.add_argument("manifests", nargs="*", help="manifest sets (default: the bundled urban and off-road tables)")
    p.add_argument("--json", help="write the JSON table here")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, default in (("workers", os.cpu_count() or 1), ("verbose", 0), ("output", None), ("taxonomy", [])):
        if not hasattr(args, key):
            setattr(args, key, default)
    if args.command == "refine" and args.output is None:
        args.output = "."
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (TaxopriorError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
