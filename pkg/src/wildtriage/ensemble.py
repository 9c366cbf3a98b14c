"""Vote combination and full-pipeline orchestration.

Two image-level voting schemes are provided. The hierarchical scheme is
conservative: any model predicting a higher-priority class wins, so a single
wildcat vote is never outvoted. The best-accuracy scheme takes the plurality
of argmax labels, breaking ties first by the tied class's mean score across
all votes, then by taxonomy priority; every tie-break leaves an audit entry.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from . import imaging
from .catalog import Catalog
from .curation import ClassTaxonomy, crop_to_box, resolve_taxonomy
from .errors import ConfigurationError, DataError, TriageError
from .stages import (
    DEFAULT_FILL,
    DEFAULT_MIN_CONFIDENCE,
    BackendDescriptor,
    ClassScores,
    RegionProposal,
    classify,
    composite_mask,
    detect_regions,
    letterbox,
)

VOTE_METHODS = ("hierarchical", "best_accuracy")
AGGREGATION_POLICIES = ("priority", "pooled")
MAX_LOCAL_MODELS = 3
MAX_GLOBAL_MODELS = 3


def argmax_label(scores: ClassScores, taxonomy: ClassTaxonomy) -> str:
    """Highest score wins; exact ties go to the higher-priority class."""
    best_index = 0
    best = scores.scores[0]
    for index, value in enumerate(scores.scores[1:], start=1):
        if value > best:
            best, best_index = value, index
    return taxonomy.classes[best_index]


@dataclass(frozen=True)
class Vote:
    model_id: str
    scale: str  # "local" or "global"
    scores: ClassScores
    argmax_label: str
    box_index: Optional[int] = None

    def __post_init__(self) -> None:
        if self.scale not in ("local", "global"):
            raise DataError(f"unknown vote scale {self.scale!r}")
        if self.scale == "local" and self.box_index is None:
            raise DataError("local votes must carry a box_index")

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "scale": self.scale,
            "box_index": self.box_index,
            "label": self.argmax_label,
            "scores": list(self.scores.scores),
        }


def make_vote(
    model_id: str,
    scale: str,
    scores: ClassScores,
    taxonomy: ClassTaxonomy,
    box_index: Optional[int] = None,
) -> Vote:
    return Vote(
        model_id=model_id,
        scale=scale,
        scores=scores,
        argmax_label=argmax_label(scores, taxonomy),
        box_index=box_index,
    )


@dataclass(frozen=True)
class VoteResult:
    image_id: str
    final_label: str
    method: str
    votes: tuple[Vote, ...]
    audit: tuple[str, ...] = ()


def hierarchical_vote(
    votes: Sequence[Vote],
    taxonomy: ClassTaxonomy,
    image_id: str = "",
) -> VoteResult:
    """The highest-priority class any model predicted wins outright."""
    if not votes:
        raise DataError("hierarchical_vote needs at least one vote")
    final = min((v.argmax_label for v in votes), key=taxonomy.priority)
    return VoteResult(image_id=image_id, final_label=final,
                      method="hierarchical", votes=tuple(votes))


def plurality_vote(
    votes: Sequence[Vote],
    taxonomy: ClassTaxonomy,
    image_id: str = "",
) -> VoteResult:
    """Most frequent argmax label; ties fall to mean score, then priority."""
    if not votes:
        raise DataError("plurality_vote needs at least one vote")
    counts = Counter(v.argmax_label for v in votes)
    top = max(counts.values())
    tied = sorted((label for label, c in counts.items() if c == top),
                  key=taxonomy.priority)
    audit: tuple[str, ...] = ()
    if len(tied) == 1:
        final = tied[0]
    else:
        means = {
            label: sum(v.scores.scores[taxonomy.priority(label)] for v in votes) / len(votes)
            for label in tied
        }
        best_mean = max(means.values())
        by_mean = [label for label in tied if means[label] == best_mean]
        if len(by_mean) == 1:
            final = by_mean[0]
            audit = (f"tie {tied} broken by mean score -> {final}",)
        else:
            final = by_mean[0]
            audit = (f"tie {by_mean} broken by taxonomy priority -> {final}",)
    return VoteResult(image_id=image_id, final_label=final,
                      method="best_accuracy", votes=tuple(votes), audit=audit)


def _vote_fn(method: str):
    if method == "hierarchical":
        return hierarchical_vote
    if method == "best_accuracy":
        return plurality_vote
    raise ConfigurationError(f"unknown vote method {method!r}; known: {VOTE_METHODS}")


def aggregate_image_label(
    box_results: Optional[Sequence[VoteResult]],
    global_result: Optional[VoteResult],
    taxonomy: ClassTaxonomy,
    *,
    policy: str = "priority",
    method: str = "best_accuracy",
    image_id: str = "",
) -> VoteResult:
    """Combine per-box decisions (and an optional whole-frame decision).

    The default policy takes the highest-priority per-box label, falling
    back to the global decision and finally to the background class when
    detection produced nothing. The pooled policy throws every vote into
    one plurality.
    """
    if box_results is None and global_result is None:
        raise DataError("aggregate_image_label needs box results or a global result")
    if policy not in AGGREGATION_POLICIES:
        raise ConfigurationError(f"unknown aggregation policy {policy!r}")
    box_results = list(box_results or [])
    all_votes = tuple(v for r in box_results for v in r.votes)
    if global_result is not None:
        all_votes += tuple(global_result.votes)

    if policy == "pooled":
        if all_votes:
            pooled = plurality_vote(all_votes, taxonomy, image_id)
            return replace(pooled, audit=pooled.audit + ("policy:pooled",))
        return VoteResult(image_id=image_id, final_label=taxonomy.lowest_priority,
                          method=method, votes=(), audit=("fallback:background",))

    if box_results:
        final = min((r.final_label for r in box_results), key=taxonomy.priority)
        audit = tuple(a for r in box_results for a in r.audit)
        return VoteResult(image_id=image_id, final_label=final, method=method,
                          votes=all_votes, audit=audit)
    if global_result is not None:
        return VoteResult(image_id=image_id, final_label=global_result.final_label,
                          method=method, votes=all_votes,
                          audit=global_result.audit + ("fallback:global",))
    return VoteResult(image_id=image_id, final_label=taxonomy.lowest_priority,
                      method=method, votes=(), audit=("fallback:background",))


@dataclass(frozen=True)
class BoxVotes:
    """One surviving region proposal plus every local model's vote on it."""

    proposal: RegionProposal
    votes: tuple[Vote, ...]


def decide_image(
    image_id: str,
    box_votes: Sequence[BoxVotes],
    global_votes: Sequence[Vote],
    taxonomy: ClassTaxonomy,
    *,
    method: str = "best_accuracy",
    policy: str = "priority",
    min_confidence: Optional[float] = None,
) -> tuple[VoteResult, list[VoteResult]]:
    """Vote per box, then aggregate to one image label.

    ``min_confidence`` re-filters boxes (what-if replay); the live pipeline
    passes None because detection already thresholded.
    """
    vote = _vote_fn(method)
    surviving = [
        bv for bv in box_votes
        if min_confidence is None or bv.proposal.confidence >= min_confidence
    ]
    box_results = [vote(bv.votes, taxonomy, image_id) for bv in surviving]
    global_result = vote(list(global_votes), taxonomy, image_id) if global_votes else None
    if not box_results and global_result is None:
        final = VoteResult(image_id=image_id, final_label=taxonomy.lowest_priority,
                           method=method, votes=(), audit=("fallback:background",))
    else:
        final = aggregate_image_label(
            box_results, global_result, taxonomy,
            policy=policy, method=method, image_id=image_id,
        )
    return final, box_results


# ---------------------------------------------------------------------------
# Pipeline configuration and execution


@dataclass(frozen=True)
class PipelineConfig:
    taxonomy: ClassTaxonomy
    detector: BackendDescriptor
    local_classifiers: tuple[BackendDescriptor, ...]
    global_classifiers: tuple[BackendDescriptor, ...] = ()
    segmenter: Optional[BackendDescriptor] = None
    segmentation: bool = False
    vote_method: str = "best_accuracy"
    aggregation: str = "priority"
    min_confidence: float = DEFAULT_MIN_CONFIDENCE
    pad_frac: float = 0.0
    fill: tuple[int, int, int] = DEFAULT_FILL
    seed: int = 0
    workers: int = 1
    failure_threshold: float = 0.01

    def __post_init__(self) -> None:
        if not self.local_classifiers:
            raise ConfigurationError("pipeline needs at least one local classifier")
        if len(self.local_classifiers) > MAX_LOCAL_MODELS:
            raise ConfigurationError(
                f"at most {MAX_LOCAL_MODELS} local models, got {len(self.local_classifiers)}"
            )
        if len(self.global_classifiers) > MAX_GLOBAL_MODELS:
            raise ConfigurationError(
                f"at most {MAX_GLOBAL_MODELS} global models, got {len(self.global_classifiers)}"
            )
        if self.vote_method not in VOTE_METHODS:
            raise ConfigurationError(f"unknown vote method {self.vote_method!r}")
        if self.aggregation not in AGGREGATION_POLICIES:
            raise ConfigurationError(f"unknown aggregation policy {self.aggregation!r}")
        if not (0.0 <= self.min_confidence <= 1.0):
            raise ConfigurationError(f"min_confidence {self.min_confidence} outside [0,1]")
        if self.segmentation and self.segmenter is None:
            raise ConfigurationError("segmentation enabled but no segmenter configured")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if self.detector.role != "detector":
            raise ConfigurationError("detector slot needs a detector backend")
        for desc in (*self.local_classifiers, *self.global_classifiers):
            if desc.role != "classifier":
                raise ConfigurationError("classifier slots need classifier backends")
        if self.segmenter is not None and self.segmenter.role != "segmenter":
            raise ConfigurationError("segmenter slot needs a segmenter backend")

    def semantic_dict(self) -> dict:
        """Everything that can change results; excludes execution knobs."""
        return {
            "taxonomy": self.taxonomy.to_dict(),
            "detector": self.detector.to_dict(),
            "local_classifiers": [d.to_dict() for d in self.local_classifiers],
            "global_classifiers": [d.to_dict() for d in self.global_classifiers],
            "segmenter": self.segmenter.to_dict() if self.segmenter else None,
            "segmentation": self.segmentation,
            "vote_method": self.vote_method,
            "aggregation": self.aggregation,
            "min_confidence": self.min_confidence,
            "pad_frac": self.pad_frac,
            "fill": list(self.fill),
            "seed": self.seed,
        }

    def to_dict(self) -> dict:
        out = self.semantic_dict()
        out["workers"] = self.workers
        out["failure_threshold"] = self.failure_threshold
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        def desc(entry):
            return BackendDescriptor.from_dict(entry) if entry else None

        return cls(
            taxonomy=resolve_taxonomy(data["taxonomy"]),
            detector=BackendDescriptor.from_dict(data["detector"]),
            local_classifiers=tuple(
                BackendDescriptor.from_dict(d) for d in data["local_classifiers"]
            ),
            global_classifiers=tuple(
                BackendDescriptor.from_dict(d) for d in data.get("global_classifiers", [])
            ),
            segmenter=desc(data.get("segmenter")),
            segmentation=bool(data.get("segmentation", False)),
            vote_method=data.get("vote_method", "best_accuracy"),
            aggregation=data.get("aggregation", "priority"),
            min_confidence=float(data.get("min_confidence", DEFAULT_MIN_CONFIDENCE)),
            pad_frac=float(data.get("pad_frac", 0.0)),
            fill=tuple(data.get("fill", DEFAULT_FILL)),
            seed=int(data.get("seed", 0)),
            workers=int(data.get("workers", 1)),
            failure_threshold=float(data.get("failure_threshold", 0.01)),
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.semantic_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def backend_versions(self) -> dict[str, str]:
        versions = {"detector": self.detector.version()}
        for i, desc in enumerate(self.local_classifiers):
            versions[f"local[{i}]"] = desc.version()
        for i, desc in enumerate(self.global_classifiers):
            versions[f"global[{i}]"] = desc.version()
        if self.segmenter is not None:
            versions["segmenter"] = self.segmenter.version()
        return versions


@dataclass
class PipelineRun:
    results: list[VoteResult]
    records: list[dict]
    failures: list[dict]
    run_record: dict

    @property
    def ok(self) -> bool:
        return self.run_record["status"] == "ok"


class _Backends:
    """Backend instances for one worker; built once per process."""

    def __init__(self, config: PipelineConfig):
        from .backends import build_backend

        self.detector = build_backend(config.detector)
        self.locals = [build_backend(d) for d in config.local_classifiers]
        self.globals = [build_backend(d) for d in config.global_classifiers]
        self.segmenter = build_backend(config.segmenter) if config.segmenter else None


def _process_one(image, root: Path, config: PipelineConfig, backends: _Backends) -> dict:
    pixels = imaging.load_pixels_ref(image.file_ref, root, image.width_px, image.height_px)
    taxonomy = config.taxonomy
    proposals = detect_regions(backends.detector, image, config.min_confidence, pixels)

    def prepared_inputs(source: np.ndarray, classifiers) -> dict[int, np.ndarray]:
        # classifiers sharing an input resolution share one letterboxed array
        return {
            resolution: letterbox(source, resolution, config.fill)
            for resolution in {clf.resolution for clf in classifiers}
        }

    box_votes: list[BoxVotes] = []
    for index, proposal in enumerate(proposals):
        crop = crop_to_box(pixels, proposal.box, config.pad_frac)
        if config.segmentation and backends.segmenter is not None:
            key = f"{image.image_id}:{index}"
            mask = backends.segmenter.segment(crop, key)
            crop = composite_mask(crop, mask, config.fill)
        inputs = prepared_inputs(crop, backends.locals)
        votes = []
        for clf in backends.locals:
            scores = classify(clf, inputs[clf.resolution], taxonomy,
                              key=f"{image.image_id}:{index}")
            votes.append(make_vote(clf.model_id, "local", scores, taxonomy, index))
        box_votes.append(BoxVotes(proposal=proposal, votes=tuple(votes)))

    global_votes = []
    if backends.globals:
        inputs = prepared_inputs(pixels, backends.globals)
        for clf in backends.globals:
            scores = classify(clf, inputs[clf.resolution], taxonomy,
                              key=f"{image.image_id}:global")
            global_votes.append(make_vote(clf.model_id, "global", scores, taxonomy))

    final, box_results = decide_image(
        image.image_id, box_votes, global_votes, taxonomy,
        method=config.vote_method, policy=config.aggregation,
    )
    return {
        "image_id": image.image_id,
        "final_label": final.final_label,
        "method": final.method,
        "aggregation": config.aggregation,
        "boxes": [
            {
                "box": list(bv.proposal.box.as_tuple()),
                "confidence": bv.proposal.confidence,
                "detector_class": bv.proposal.detector_class,
            }
            for bv in box_votes
        ],
        "box_votes": [[v.to_dict() for v in bv.votes] for bv in box_votes],
        "box_labels": [r.final_label for r in box_results],
        "global_votes": [v.to_dict() for v in global_votes],
        "audit": list(final.audit),
    }


def _run_chunk(config_data: dict, root: str, images) -> list[dict]:
    config = PipelineConfig.from_dict(config_data)
    backends = _Backends(config)
    out = []
    for image in images:
        try:
            out.append(_process_one(image, Path(root), config, backends))
        except TriageError as exc:
            out.append({
                "image_id": image.image_id,
                "error": str(exc),
                "error_type": type(exc).__name__,
            })
    return out


def record_to_result(record: Mapping, taxonomy: ClassTaxonomy) -> VoteResult:
    """Rebuild a VoteResult view from a stored pipeline record."""
    votes = []
    for per_box in record.get("box_votes", []):
        for v in per_box:
            votes.append(Vote(
                model_id=v["model_id"], scale=v["scale"],
                scores=ClassScores(taxonomy=taxonomy.name, scores=tuple(v["scores"])),
                argmax_label=v["label"], box_index=v["box_index"],
            ))
    for v in record.get("global_votes", []):
        votes.append(Vote(
            model_id=v["model_id"], scale=v["scale"],
            scores=ClassScores(taxonomy=taxonomy.name, scores=tuple(v["scores"])),
            argmax_label=v["label"], box_index=None,
        ))
    return VoteResult(
        image_id=record["image_id"],
        final_label=record["final_label"],
        method=record["method"],
        votes=tuple(votes),
        audit=tuple(record.get("audit", [])),
    )


def run_pipeline(catalog: Catalog, config: PipelineConfig) -> PipelineRun:
    """Detect, crop, optionally mask, classify, and vote over a whole catalog.

    Per-image stage failures become failure records and the run continues;
    the run only reports a failed status when the failure fraction exceeds
    the configured threshold. Results are ordered by image_id and identical
    for any worker count.
    """
    images = sorted(catalog.images, key=lambda im: im.image_id)
    config_data = config.to_dict()
    root = str(catalog.root)

    if config.workers == 1 or len(images) <= 1:
        raw = _run_chunk(config_data, root, images)
    else:
        workers = min(config.workers, len(images))
        chunks = [images[i::workers] for i in range(workers)]
        raw = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, [config_data] * workers,
                                 [root] * workers, chunks):
                raw.extend(part)
        raw.sort(key=lambda r: r["image_id"])

    records = [r for r in raw if "error" not in r]
    failures = [r for r in raw if "error" in r]
    failure_rate = len(failures) / len(images) if images else 0.0
    status = "ok" if failure_rate <= config.failure_threshold else "failed"
    run_record = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "backend_versions": config.backend_versions(),
        "taxonomy": config.taxonomy.to_dict(),
        "config": config.semantic_dict(),
        "n_images": len(images),
        "n_results": len(records),
        "n_failures": len(failures),
        "failure_threshold": config.failure_threshold,
        "status": status,
    }
    results = [record_to_result(r, config.taxonomy) for r in records]
    return PipelineRun(results=results, records=records, failures=failures,
                       run_record=run_record)
