"""Command-line surface: reproducible batch workflows over the pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend/stage failure
(including runs whose failure fraction exceeds the configured threshold).
Logs go to stderr; data goes to files (or stdout for what-if summaries), so
standard output stays pipeable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .catalog import (
    BurstPolicy,
    bursts_to_text,
    group_bursts,
    ingest_manifest,
    load_annotations,
)
from .curation import (
    burst_split,
    camera_holdout_split,
    remap_taxonomy,
    resolve_taxonomy,
    sample_background_boxes,
)
from .ensemble import PipelineConfig, run_pipeline
from .errors import ConfigurationError, DataError, StageError, TriageError
from .evaluation import (
    evaluate,
    load_experiment_inputs,
    run_experiment,
    write_report,
)

logger = logging.getLogger("wildtriage")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_STAGE = 3


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _fractions(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(parts)  # type: ignore[return-value]


def _pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated values")
    return tuple(parts)  # type: ignore[return-value]


def _burst_policy(args) -> BurstPolicy:
    counts = None
    if args.burst_counts:
        counts = {}
        for pair in args.burst_counts.split(","):
            camera, _, count = pair.partition("=")
            counts[camera] = int(count)
    return BurstPolicy(gap_seconds=args.burst_gap, fixed_counts=counts)


def _dry_run(args, effective: dict) -> bool:
    if args.dry_run:
        print(json.dumps(effective, sort_keys=True, indent=2, default=str))
        return True
    return False


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(args) -> int:
    policy = _burst_policy(args)
    effective = {
        "command": "ingest", "manifest": args.manifest, "out": args.out,
        "no_pixels": args.no_pixels, "burst_gap": policy.gap_seconds,
        "burst_counts": dict(policy.fixed_counts or {}),
    }
    if _dry_run(args, effective):
        return EXIT_OK
    catalog = ingest_manifest(args.manifest, no_pixels=args.no_pixels)
    bursts = group_bursts(catalog.images, policy)
    out = _out_dir(args)
    (out / "catalog.csv").write_text(catalog.to_manifest_text(), encoding="utf-8")
    (out / "bursts.csv").write_text(bursts_to_text(bursts), encoding="utf-8")
    logger.info("ingested %d images into %d bursts", len(catalog), len(bursts))
    return EXIT_OK


def cmd_split(args) -> int:
    policy = _burst_policy(args)
    effective = {
        "command": "split", "manifest": args.manifest, "out": args.out,
        "fractions": list(args.fractions), "seed": args.seed,
        "holdout": args.holdout, "burst_gap": policy.gap_seconds,
        "burst_counts": dict(policy.fixed_counts or {}),
        "train_val": list(args.train_val),
    }
    if _dry_run(args, effective):
        return EXIT_OK
    catalog = ingest_manifest(args.manifest, no_pixels=True)
    bursts = group_bursts(catalog.images, policy)
    if args.holdout:
        split = camera_holdout_split(bursts, args.holdout, args.train_val, args.seed)
    else:
        split = burst_split(bursts, args.fractions, args.seed)
    out = _out_dir(args)
    (out / "splits.csv").write_text(split.to_text(), encoding="utf-8")
    counts = {name: len(split.bursts_in(name)) for name in ("train", "val", "test")}
    logger.info("split %d bursts (%s): %s", len(bursts), split.strategy, counts)
    return EXIT_OK


def cmd_sample_bg(args) -> int:
    effective = {
        "command": "sample-bg", "manifest": args.manifest,
        "annotations": args.annotations, "label_set": args.label_set,
        "n": args.n, "seed": args.seed, "size_range": list(args.size_range),
        "out": args.out,
    }
    if _dry_run(args, effective):
        return EXIT_OK
    catalog = ingest_manifest(args.manifest, no_pixels=True)
    annotations = load_annotations(args.annotations, catalog, label_set=args.label_set)
    out = _out_dir(args)
    lines = []
    for image in catalog:
        ann = annotations.get(image.image_id)
        gt_boxes = [box for box, _ in ann.boxes] if ann else []
        boxes = sample_background_boxes(
            image, gt_boxes, args.n, args.size_range, args.seed)
        lines.append(json.dumps({
            "image_id": image.image_id,
            "boxes": [list(b.as_tuple()) for b in boxes],
        }, sort_keys=True))
    (out / "background_boxes.ndjson").write_text(
        "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    logger.info("sampled background boxes for %d images", len(catalog))
    return EXIT_OK


def cmd_remap(args) -> int:
    taxonomy = resolve_taxonomy(args.taxonomy)
    effective = {
        "command": "remap", "manifest": args.manifest,
        "annotations": args.annotations, "label_set": args.label_set,
        "taxonomy": taxonomy.to_dict(), "out": args.out,
    }
    if _dry_run(args, effective):
        return EXIT_OK
    from .catalog import annotation_to_xml

    catalog = ingest_manifest(args.manifest, no_pixels=True)
    annotations = load_annotations(args.annotations, catalog, label_set=args.label_set)
    remapped = remap_taxonomy(annotations.values(), taxonomy)
    out = _out_dir(args)
    for ann in remapped:
        image = catalog.get(ann.image_id)
        (out / f"{ann.image_id}.xml").write_text(
            annotation_to_xml(ann, image), encoding="utf-8")
    logger.info("remapped %d annotations to taxonomy %s", len(remapped), taxonomy.name)
    return EXIT_OK


def _load_pipeline_config(args) -> PipelineConfig:
    data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.workers is not None:
        data["workers"] = args.workers
    if args.seed is not None:
        data["seed"] = args.seed
    return PipelineConfig.from_dict(data)


def cmd_run(args) -> int:
    config = _load_pipeline_config(args)
    effective = {"command": "run", "manifest": args.manifest, "out": args.out,
                 "config": config.to_dict()}
    if _dry_run(args, effective):
        return EXIT_OK
    from .service import persist_run

    catalog = ingest_manifest(args.manifest)
    run = run_pipeline(catalog, config)
    out = _out_dir(args)
    persist_run(out, catalog, config, run, run_id=out.name)
    logger.info(
        "pipeline over %d images: %d results, %d failures, status=%s",
        len(catalog), len(run.records), len(run.failures), run.run_record["status"],
    )
    return EXIT_OK if run.ok else EXIT_STAGE


def cmd_experiment(args) -> int:
    inputs = load_experiment_inputs(args.config)
    experiment_ids = [args.id] if args.id else list(inputs.experiment_ids)
    overrides = {}
    if args.workers is not None:
        overrides["workers"] = args.workers
    effective = {
        "command": "experiment", "ids": experiment_ids, "config": args.config,
        "out": args.out, "overrides": overrides,
        "split_seed": inputs.split_seed, "fractions": list(inputs.fractions),
    }
    if _dry_run(args, effective):
        return EXIT_OK
    if not experiment_ids:
        raise ConfigurationError(
            "no experiment selected: pass --id or list ids under 'experiments' "
            "in the config file")
    status = EXIT_OK
    for experiment_id in experiment_ids:
        report = run_experiment(experiment_id, inputs, overrides)
        out = _out_dir(args) if args.id else _out_dir(args) / experiment_id
        out.mkdir(parents=True, exist_ok=True)
        text_path, _ = write_report(report, out)
        logger.info("experiment %s: overall %.1f%% over %d images -> %s",
                    experiment_id, 100 * report.overall_accuracy,
                    report.n_images, text_path)
        if report.metadata.get("run_status") != "ok":
            status = EXIT_STAGE
    return status


def cmd_evaluate(args) -> int:
    taxonomy = resolve_taxonomy(args.taxonomy)
    effective = {
        "command": "evaluate", "results": args.results, "truth": args.truth,
        "taxonomy": taxonomy.to_dict(), "out": args.out,
    }
    if _dry_run(args, effective):
        return EXIT_OK
    from .ensemble import record_to_result

    predictions = []
    with open(args.results, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                predictions.append(record_to_result(json.loads(line), taxonomy))
    truth = []
    with open(args.truth, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("image_id,"):
                continue
            image_id, _, label = line.partition(",")
            truth.append((image_id, label))
    report = evaluate(predictions, truth, taxonomy)
    out = _out_dir(args)
    write_report(report, out)
    logger.info("evaluated %d predictions: overall %.1f%%",
                report.n_images, 100 * report.overall_accuracy)
    return EXIT_OK


def cmd_whatif(args) -> int:
    overrides = {}
    if args.method is not None:
        overrides["vote_method"] = args.method
    if args.min_conf is not None:
        overrides["min_confidence"] = args.min_conf
    if args.aggregation is not None:
        overrides["aggregation"] = args.aggregation
    effective = {"command": "whatif", "run_dir": args.run_dir, "overrides": overrides,
                 "out": args.out}
    if _dry_run(args, effective):
        return EXIT_OK
    from .service import whatif_for_dir

    summary = whatif_for_dir(args.run_dir, overrides)
    payload = json.dumps(summary, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return EXIT_OK


def cmd_export(args) -> int:
    effective = {"command": "export", "run_dir": args.run_dir,
                 "format": args.format, "out": args.out}
    if _dry_run(args, effective):
        return EXIT_OK
    from .service import export_for_dir

    payload = export_for_dir(args.run_dir, args.format)
    Path(args.out).write_text(payload, encoding="utf-8")
    logger.info("exported decisions (%s) to %s", args.format, args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    effective = {"command": "serve", "store": args.store, "host": args.host,
                 "port": args.port, "token": bool(args.token)}
    if _dry_run(args, effective):
        return EXIT_OK
    import uvicorn

    from .service import RunStore, create_app

    app = create_app(RunStore(args.store), token=args.token)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="wildtriage", description=__doc__)
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dry-run", action="store_true",
                        help="print the resolved effective config and exit")

    burst_flags = argparse.ArgumentParser(add_help=False)
    burst_flags.add_argument("--burst-gap", type=float, default=5.0,
                             help="max intra-burst gap in seconds")
    burst_flags.add_argument("--burst-counts", default="",
                             help="fixed counts per camera, e.g. 1=3,3=8")

    p = sub.add_parser("ingest", parents=[common, burst_flags],
                       help="read a manifest into a canonical catalog and bursts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-pixels", action="store_true",
                   help="metadata-only run; skip file checks and IR derivation")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common, burst_flags],
                       help="assign bursts to train/val/test without leakage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", type=_fractions, default=(0.7, 0.2, 0.1))
    p.add_argument("--train-val", type=_pair, default=(0.7 / 0.9, 0.2 / 0.9),
                   help="train/val fractions when a camera is held out")
    p.add_argument("--holdout", default=None, help="camera id to hold out as test")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("sample-bg", parents=[common],
                       help="sample background boxes outside annotated boxes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--label-set", default="set1")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size-range", type=_pair, default=(0.1, 0.5))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_bg)

    p = sub.add_parser("remap", parents=[common],
                       help="rewrite annotation labels into a target taxonomy")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--label-set", default="set1")
    p.add_argument("--taxonomy", required=True, help="builtin name or JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_remap)

    p = sub.add_parser("run", parents=[common],
                       help="run the full pipeline over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("experiment", parents=[common],
                       help="run one named experiment, or the config's whole grid")
    p.add_argument("--id", default=None,
                   help="experiment id; omit to run every id the config enumerates")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score stored results against ground truth")
    p.add_argument("--results", required=True, help="results.ndjson from a run")
    p.add_argument("--truth", required=True, help="CSV of image_id,label")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("whatif", parents=[common],
                       help="recompute labels from stored scores, read-only")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--method", choices=["hierarchical", "best_accuracy"], default=None)
    p.add_argument("--min-conf", type=float, default=None)
    p.add_argument("--aggregation", choices=["priority", "pooled"], default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_whatif)

    p = sub.add_parser("serve", parents=[common], help="start the review service")
    p.add_argument("--store", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--token", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export", parents=[common], help="export review decisions")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", choices=["records", "xml"], default="records")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (StageError,) as exc:
        logger.error("stage failure: %s", exc)
        return EXIT_STAGE
    except (DataError, ConfigurationError, TriageError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except FileNotFoundError as exc:
        logger.error("missing file: %s", exc)
        return EXIT_DATA


def main(argv=None) -> int:
    try:
        return dispatch(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
