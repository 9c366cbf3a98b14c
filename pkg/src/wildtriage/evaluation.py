"""Skew-aware evaluation, the named experiment grid, and report files.

Accuracy identities are kept in exact integer arithmetic; floats only appear
when a ratio is materialized and percentages are formatted at one decimal.
With 1% wildcat prevalence in the wild data, overall accuracy alone is
meaningless, so per-class recall and precision always ride along.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .catalog import Annotation, BurstPolicy, Catalog, group_bursts
from .curation import (
    DROP,
    FOUR_CLASS,
    FIVE_CLASS,
    TWO_CLASS,
    TWO_CLASS_NO_UNKNOWN,
    ClassTaxonomy,
    SplitAssignment,
    burst_split,
    camera_holdout_split,
    derive_image_labels,
    remap_taxonomy,
)
from .ensemble import PipelineConfig, VoteResult, run_pipeline
from .errors import ConfigurationError, DataError
from .stages import BackendDescriptor

# One ecologist reviews roughly 75 images every 3 minutes.
REVIEW_RATE_PER_MINUTE = 75 / 3


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count matrix: rows are ground truth, columns are predictions."""

    taxonomy: str
    labels: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        n = len(self.labels)
        if len(self.counts) != n or any(len(row) != n for row in self.counts):
            raise DataError(f"confusion matrix must be {n}x{n}")
        if any(c < 0 for row in self.counts for c in row):
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    @property
    def trace(self) -> int:
        return sum(self.counts[i][i] for i in range(len(self.labels)))

    def row_sum(self, label: str) -> int:
        return sum(self.counts[self.labels.index(label)])

    def col_sum(self, label: str) -> int:
        j = self.labels.index(label)
        return sum(row[j] for row in self.counts)


@dataclass
class EvaluationReport:
    taxonomy: ClassTaxonomy
    confusion: ConfusionMatrix
    n_images: int
    correct: int
    per_class_recall: dict[str, Optional[float]]
    per_class_precision: dict[str, Optional[float]]
    review_savings_minutes: float
    background_label: Optional[str]
    correct_excl_background: int
    n_excl_background: int
    metadata: dict = field(default_factory=dict)

    @property
    def overall_accuracy(self) -> float:
        return self.correct / self.n_images if self.n_images else 0.0

    @property
    def overall_accuracy_excl_background(self) -> Optional[float]:
        if self.background_label is None or self.n_excl_background == 0:
            return None
        return self.correct_excl_background / self.n_excl_background


def estimate_review_savings(
    results: Iterable[VoteResult | str],
    auto_discard_labels: set[str],
    review_rate: float = REVIEW_RATE_PER_MINUTE,
) -> float:
    """Minutes of manual review avoided by trusting auto-discarded labels."""
    if review_rate <= 0:
        raise DataError(f"review_rate must be positive, got {review_rate}")
    labels = (r.final_label if isinstance(r, VoteResult) else r for r in results)
    discarded = sum(1 for label in labels if label in auto_discard_labels)
    return discarded / review_rate


def evaluate(
    predictions: Sequence[VoteResult],
    ground_truth: Sequence[tuple[str, str]] | Mapping[str, str],
    taxonomy: ClassTaxonomy,
    *,
    metadata: Optional[dict] = None,
) -> EvaluationReport:
    """Confusion matrix, overall and per-class accuracy, review savings.

    Per-class accuracy is recall: the number that matters for a rare class
    is how many of its images were retained. Precision is emitted alongside.
    Classes absent from the ground truth report recall None rather than zero.
    """
    truth = dict(ground_truth)
    pred_ids = [p.image_id for p in predictions]
    missing_truth = sorted(set(pred_ids) - set(truth))
    missing_preds = sorted(set(truth) - set(pred_ids))
    if missing_truth or missing_preds:
        raise DataError(
            f"prediction/ground-truth mismatch; no truth for {missing_truth[:10]}, "
            f"no prediction for {missing_preds[:10]}"
        )

    labels = taxonomy.classes
    index = {label: i for i, label in enumerate(labels)}
    for image_id, label in truth.items():
        if label not in index:
            raise DataError(f"ground truth label {label!r} for {image_id} not in taxonomy")

    counts = [[0] * len(labels) for _ in labels]
    for pred in predictions:
        if pred.final_label not in index:
            raise DataError(f"predicted label {pred.final_label!r} not in taxonomy")
        counts[index[truth[pred.image_id]]][index[pred.final_label]] += 1
    confusion = ConfusionMatrix(
        taxonomy=taxonomy.name, labels=labels,
        counts=tuple(tuple(row) for row in counts),
    )

    recall: dict[str, Optional[float]] = {}
    precision: dict[str, Optional[float]] = {}
    for i, label in enumerate(labels):
        support = sum(counts[i])
        predicted = sum(row[i] for row in counts)
        recall[label] = counts[i][i] / support if support else None
        precision[label] = counts[i][i] / predicted if predicted else None

    background = taxonomy.lowest_priority
    bg_index = index[background]
    correct = confusion.trace
    correct_excl = correct - counts[bg_index][bg_index]
    n_excl = confusion.total - sum(counts[bg_index])

    savings = estimate_review_savings(predictions, {background})
    return EvaluationReport(
        taxonomy=taxonomy,
        confusion=confusion,
        n_images=confusion.total,
        correct=correct,
        per_class_recall=recall,
        per_class_precision=precision,
        review_savings_minutes=savings,
        background_label=background,
        correct_excl_background=correct_excl,
        n_excl_background=n_excl,
        metadata=dict(metadata or {}),
    )


# ---------------------------------------------------------------------------
# Experiment grid


@dataclass(frozen=True)
class ExperimentSpec:
    experiment_id: str
    description: str
    split: str  # "burst" or "holdout"
    annotation_set: str  # "set1" or "set2"
    taxonomy: ClassTaxonomy
    remap_chain: tuple[ClassTaxonomy, ...]
    segmentation: bool
    vote_method: str
    global_models: bool
    holdout_camera: Optional[str] = None

    @property
    def dropped_classes(self) -> tuple[str, ...]:
        dropped = []
        for taxonomy in self.remap_chain:
            if taxonomy.remap:
                dropped.extend(sorted(
                    label for label, target in taxonomy.remap.items() if target == DROP
                ))
        return tuple(dropped)


_CHAIN_4 = (FOUR_CLASS,)
_CHAIN_5 = (FIVE_CLASS,)
_CHAIN_2 = (FOUR_CLASS, TWO_CLASS)
_CHAIN_2_NO_UNKNOWN = (FOUR_CLASS, TWO_CLASS_NO_UNKNOWN)


def _spec(experiment_id, description, *, split="burst", annotation_set="set1",
          chain=_CHAIN_4, segmentation=False, vote_method="best_accuracy",
          global_models=False, holdout_camera=None) -> ExperimentSpec:
    return ExperimentSpec(
        experiment_id=experiment_id,
        description=description,
        split=split,
        annotation_set=annotation_set,
        taxonomy=chain[-1],
        remap_chain=chain,
        segmentation=segmentation,
        vote_method=vote_method,
        global_models=global_models,
        holdout_camera=holdout_camera,
    )


_FIXED_EXPERIMENTS = {
    "T2_burst": _spec("T2_burst", "Cross-contamination control (burst-based split)"),
    "T3": _spec("T3", "Local and global model architecture", global_models=True),
    "T4_hier": _spec("T4_hier", "Ensemble voting (hierarchical)",
                     vote_method="hierarchical", global_models=True),
    "T4_best": _spec("T4_best", "Ensemble voting (best accuracy)", global_models=True),
    "T6a": _spec("T6a", "Dataset class adjustment (stricter wildcat labels)",
                 annotation_set="set2"),
    "T6b": _spec("T6b", "Dataset class adjustment (wildcat day/night separated)",
                 annotation_set="set2", chain=_CHAIN_5),
    "T7": _spec("T7", "Segmented image classification",
                annotation_set="set2", segmentation=True),
    "T8a": _spec("T8a", "Two class model (segmented)",
                 annotation_set="set2", chain=_CHAIN_2, segmentation=True),
    "T8b": _spec("T8b", "Two class model (local crop)",
                 annotation_set="set2", chain=_CHAIN_2),
    "T8c": _spec("T8c", "Two class model (unknown animals removed, segmented)",
                 annotation_set="set2", chain=_CHAIN_2_NO_UNKNOWN, segmentation=True),
}

_HOLDOUT_PATTERN = re.compile(r"^T2_holdout\((?P<camera>[^)]+)\)$")

EXPERIMENT_ID_FORMS = tuple(sorted(_FIXED_EXPERIMENTS)) + ("T2_holdout(<camera>)",)


def parse_experiment_id(experiment_id: str) -> ExperimentSpec:
    if experiment_id in _FIXED_EXPERIMENTS:
        return _FIXED_EXPERIMENTS[experiment_id]
    match = _HOLDOUT_PATTERN.match(experiment_id)
    if match:
        camera = match.group("camera")
        return _spec(
            experiment_id,
            f"Cross-contamination control (camera {camera} held out)",
            split="holdout", holdout_camera=camera,
        )
    raise ConfigurationError(
        f"unknown experiment id {experiment_id!r}; valid ids: "
        f"{', '.join(EXPERIMENT_ID_FORMS)}"
    )


@dataclass
class ExperimentInputs:
    """Everything the grid needs: data, backends per taxonomy, split policy."""

    catalog: Catalog
    annotations: Mapping[str, Mapping[str, Annotation]]  # set name -> image_id -> Annotation
    burst_policy: BurstPolicy
    detector: BackendDescriptor
    segmenter: Optional[BackendDescriptor]
    classifiers: Mapping[str, Mapping[str, Sequence[BackendDescriptor]]]
    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1)
    split_seed: int = 42
    pipeline_defaults: Mapping = field(default_factory=dict)
    experiment_ids: tuple[str, ...] = ()  # grid enumerated by the config file

    def classifier_slots(self, taxonomy: ClassTaxonomy) -> tuple[tuple, tuple]:
        entry = self.classifiers.get(taxonomy.name)
        if entry is None:
            raise ConfigurationError(
                f"no classifiers configured for taxonomy {taxonomy.name!r}; "
                f"configured: {sorted(self.classifiers)}"
            )
        return tuple(entry.get("local", ())), tuple(entry.get("global", ()))


def load_experiment_inputs(config_path: str | Path) -> ExperimentInputs:
    """Read an experiment config document; relative paths resolve against it."""
    from .catalog import ingest_manifest, load_annotations

    path = Path(config_path)
    data = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent

    def resolved(rel: str) -> str:
        candidate = Path(rel)
        return str(candidate if candidate.is_absolute() else base / candidate)

    def descriptor(entry: Mapping) -> BackendDescriptor:
        config = dict(entry.get("config", {}))
        for key in ("proposals_file", "scores_file", "masks_file"):
            if key in config:
                config[key] = resolved(config[key])
        return BackendDescriptor(kind=entry["kind"], role=entry["role"], config=config)

    catalog = ingest_manifest(resolved(data["manifest"]))
    annotations = {
        set_name: load_annotations(resolved(directory), catalog, label_set=set_name)
        for set_name, directory in data.get("annotations", {}).items()
    }
    policy_data = data.get("burst_policy", {})
    policy = BurstPolicy(
        gap_seconds=float(policy_data.get("gap_seconds", 5.0)),
        fixed_counts=policy_data.get("fixed_counts"),
    )
    classifiers = {
        taxonomy_name: {
            scale: tuple(descriptor(d) for d in slot_list)
            for scale, slot_list in slots.items()
        }
        for taxonomy_name, slots in data.get("classifiers", {}).items()
    }
    split = data.get("split", {})
    return ExperimentInputs(
        catalog=catalog,
        annotations=annotations,
        burst_policy=policy,
        detector=descriptor(data["detector"]),
        segmenter=descriptor(data["segmenter"]) if data.get("segmenter") else None,
        classifiers=classifiers,
        fractions=tuple(split.get("fractions", (0.7, 0.2, 0.1))),
        split_seed=int(split.get("seed", 42)),
        pipeline_defaults=dict(data.get("pipeline", {})),
        experiment_ids=tuple(data.get("experiments", ())),
    )


def _experiment_split(spec: ExperimentSpec, bursts, fractions, seed) -> SplitAssignment:
    if spec.split == "holdout":
        train, val, _ = fractions
        denominator = train + val
        if denominator <= 0:
            raise ConfigurationError("holdout split needs nonzero train+val fractions")
        return camera_holdout_split(
            bursts, spec.holdout_camera,
            (train / denominator, val / denominator), seed,
        )
    return burst_split(bursts, fractions, seed)


def run_experiment(
    experiment_id: str,
    inputs: ExperimentInputs,
    overrides: Optional[Mapping] = None,
) -> EvaluationReport:
    """Materialize one named configuration, run it, and evaluate its test split.

    The report's metadata echoes every flag the configuration pins down:
    split strategy, annotation set, taxonomy, segmentation, dropped classes,
    vote method, and whether global models voted.
    """
    spec = parse_experiment_id(experiment_id)
    overrides = dict(overrides or {})

    bursts = group_bursts(inputs.catalog.images, inputs.burst_policy)
    split = _experiment_split(spec, bursts, inputs.fractions, inputs.split_seed)
    test_ids = set(split.image_ids_in("test", bursts))
    test_images = tuple(im for im in inputs.catalog.images if im.image_id in test_ids)
    test_catalog = Catalog(images=test_images, root=inputs.catalog.root)

    if spec.annotation_set not in inputs.annotations:
        raise ConfigurationError(
            f"experiment {experiment_id} needs annotation set {spec.annotation_set!r}"
        )
    annotations = [
        ann for image_id, ann in inputs.annotations[spec.annotation_set].items()
        if image_id in test_ids
    ]
    for taxonomy in spec.remap_chain:
        annotations = remap_taxonomy(annotations, taxonomy)
    truth = derive_image_labels(
        (im.image_id for im in test_images),
        {ann.image_id: ann for ann in annotations},
        spec.taxonomy,
    )

    local_slots, global_slots = inputs.classifier_slots(spec.taxonomy)
    config_data = {
        "taxonomy": spec.taxonomy.to_dict(),
        "detector": inputs.detector.to_dict(),
        "local_classifiers": [d.to_dict() for d in local_slots],
        "global_classifiers": [d.to_dict() for d in global_slots] if spec.global_models else [],
        "segmenter": inputs.segmenter.to_dict() if inputs.segmenter else None,
        "segmentation": spec.segmentation,
        "vote_method": spec.vote_method,
        **dict(inputs.pipeline_defaults),
        **overrides,
    }
    config = PipelineConfig.from_dict(config_data)
    run = run_pipeline(test_catalog, config)

    metadata = {
        "experiment": spec.experiment_id,
        "description": spec.description,
        "split_strategy": split.strategy,
        "split_seed": inputs.split_seed,
        "fractions": list(inputs.fractions),
        "annotation_set": spec.annotation_set,
        "taxonomy": spec.taxonomy.name,
        "n_classes": len(spec.taxonomy),
        "segmentation": spec.segmentation,
        "dropped_classes": list(spec.dropped_classes),
        "vote_method": spec.vote_method,
        "global_models": spec.global_models,
        "config_hash": config.config_hash(),
        "pipeline_seed": config.seed,
        "n_failures": len(run.failures),
        "run_status": run.run_record["status"],
    }
    return evaluate(run.results, truth, spec.taxonomy, metadata=metadata)


# ---------------------------------------------------------------------------
# Report serialization


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100 * value:.1f}%"


def render_report_text(report: EvaluationReport) -> str:
    """Human-readable table, percentages at one decimal."""
    meta = report.metadata
    lines = []
    if meta:
        lines.append(f"Experiment: {meta.get('experiment', '-')} — {meta.get('description', '-')}")
        lines.append(
            "Flags: "
            f"split={meta.get('split_strategy', '-')} "
            f"annotations={meta.get('annotation_set', '-')} "
            f"taxonomy={meta.get('taxonomy', '-')}({meta.get('n_classes', '-')}) "
            f"segmentation={'on' if meta.get('segmentation') else 'off'} "
            f"dropped={','.join(meta.get('dropped_classes', [])) or 'none'} "
            f"vote={meta.get('vote_method', '-')} "
            f"global={'on' if meta.get('global_models') else 'off'}"
        )
        lines.append(f"Config hash: {meta.get('config_hash', '-')}")
        lines.append("")
    lines.append(f"Images evaluated: {report.n_images}")
    lines.append(f"Accuracy - Overall: {_pct(report.overall_accuracy)} "
                 f"({report.correct}/{report.n_images})")
    excl = report.overall_accuracy_excl_background
    lines.append(
        f"Accuracy - Overall excluding {report.background_label}: {_pct(excl)} "
        f"({report.correct_excl_background}/{report.n_excl_background})"
    )
    lines.append(f"Review savings: {report.review_savings_minutes:.1f} minutes "
                 f"at {REVIEW_RATE_PER_MINUTE:.0f} images/minute")
    lines.append("")
    lines.append(f"{'Class':<16}{'Recall':>10}{'Precision':>12}{'Support':>10}")
    for label in report.taxonomy.classes:
        lines.append(
            f"{label:<16}{_pct(report.per_class_recall[label]):>10}"
            f"{_pct(report.per_class_precision[label]):>12}"
            f"{report.confusion.row_sum(label):>10}"
        )
    lines.append("")
    header = "truth \\ pred".ljust(16) + "".join(f"{label:>14}" for label in report.taxonomy.classes)
    lines.append(header)
    for i, label in enumerate(report.taxonomy.classes):
        row = "".join(f"{c:>14}" for c in report.confusion.counts[i])
        lines.append(f"{label:<16}{row}")
    return "\n".join(lines) + "\n"


def report_to_ndjson(report: EvaluationReport) -> str:
    """Line-delimited record form of a report; stable field order."""
    records = [{
        "record": "summary",
        "n_images": report.n_images,
        "correct": report.correct,
        "overall_accuracy": report.overall_accuracy,
        "overall_accuracy_excl_background": report.overall_accuracy_excl_background,
        "background_label": report.background_label,
        "review_savings_minutes": report.review_savings_minutes,
        "metadata": report.metadata,
    }]
    for label in report.taxonomy.classes:
        records.append({
            "record": "class",
            "label": label,
            "recall": report.per_class_recall[label],
            "precision": report.per_class_precision[label],
            "support": report.confusion.row_sum(label),
            "predicted": report.confusion.col_sum(label),
        })
    for i, label in enumerate(report.taxonomy.classes):
        records.append({
            "record": "confusion",
            "truth": label,
            "counts": dict(zip(report.taxonomy.classes, report.confusion.counts[i])),
        })
    return "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n"


def write_report(report: EvaluationReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text_path = out / "report.txt"
    ndjson_path = out / "report.ndjson"
    text_path.write_text(render_report_text(report), encoding="utf-8")
    ndjson_path.write_text(report_to_ndjson(report), encoding="utf-8")
    return text_path, ndjson_path
