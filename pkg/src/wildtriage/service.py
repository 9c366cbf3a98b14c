"""Run persistence and the human-in-the-loop review API.

Each run is an immutable snapshot (results with full vote scores, canonical
catalog copy, run record) plus one append-only decision log. Replaying the
log from empty always reconstructs the active decision state, and what-if
reclassification is a pure function over the stored scores.
"""

import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .catalog import Annotation, BoundingBox, Catalog, annotation_to_xml, ingest_manifest
from .curation import ClassTaxonomy, crop_to_box
from .ensemble import BoxVotes, PipelineConfig, PipelineRun, Vote, decide_image, run_pipeline
from .errors import DataError, UnsupportedOverrideError
from .stages import ClassScores, RegionProposal, composite_mask

RUNS_DIR = "runs"


@dataclass(frozen=True)
class ReviewDecision:
    image_id: str
    reviewer: str
    decided_label: str
    decided_at: str
    run_id: str

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "reviewer": self.reviewer,
            "decided_label": self.decided_label,
            "decided_at": self.decided_at,
            "run_id": self.run_id,
        }


@dataclass(frozen=True)
class ReviewQueueEntry:
    image_id: str
    final_label: str
    rank: int
    wildcat_score: float
    reviewed: bool
    decided_label: Optional[str]
    artifacts: dict
    boxes: tuple = ()  # projection for overlay rendering
    votes: tuple = ()  # projection for the per-model vote table

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "final_label": self.final_label,
            "rank": self.rank,
            "wildcat_score": self.wildcat_score,
            "reviewed": self.reviewed,
            "decided_label": self.decided_label,
            "artifacts": self.artifacts,
            "boxes": list(self.boxes),
            "votes": list(self.votes),
        }


def persist_run(
    run_dir: str | Path,
    catalog: Catalog,
    config: PipelineConfig,
    run: PipelineRun,
    *,
    run_id: str,
) -> Path:
    """Write the immutable run snapshot: record, catalog copy, results."""
    directory = Path(run_dir)
    directory.mkdir(parents=True, exist_ok=True)
    record = dict(run.run_record)
    record["run_id"] = run_id
    record["manifest_root"] = str(catalog.root)
    (directory / "run.json").write_text(
        json.dumps(record, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (directory / "catalog.csv").write_text(catalog.to_manifest_text(), encoding="utf-8")
    with open(directory / "results.ndjson", "w", encoding="utf-8") as handle:
        for rec in run.records:
            handle.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(directory / "failures.ndjson", "w", encoding="utf-8") as handle:
        for rec in run.failures:
            handle.write(json.dumps(rec, sort_keys=True) + "\n")
    return directory


def load_run_records(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "results.ndjson"
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(json.loads(line))
    return records


def read_run_record(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "run.json"
    if not path.exists():
        raise DataError(f"not a run directory (no run.json): {run_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def read_decisions(run_dir: str | Path) -> tuple[list[dict], dict[str, dict]]:
    log = Path(run_dir) / "decisions.ndjson"
    if not log.exists():
        return [], {}
    return replay_decisions(log.read_text(encoding="utf-8").splitlines())


def load_run_catalog(run_dir: str | Path) -> Catalog:
    record = read_run_record(run_dir)
    snapshot = ingest_manifest(Path(run_dir) / "catalog.csv", no_pixels=True)
    return Catalog(images=snapshot.images, root=Path(record["manifest_root"]))


def whatif_for_dir(run_dir: str | Path, overrides: Mapping) -> dict:
    """Recompute labels from stored scores under hypothetical settings.

    Pure read: never mutates the run. Detection thresholds can only be
    raised, because proposals below the run's threshold were never scored.
    """
    record = read_run_record(run_dir)
    taxonomy = ClassTaxonomy.from_dict(record["taxonomy"])
    config = record["config"]
    known = {"vote_method", "min_confidence", "aggregation"}
    unknown = set(overrides) - known
    if unknown:
        raise DataError(f"unknown what-if overrides {sorted(unknown)}; valid: {sorted(known)}")

    method = overrides.get("vote_method", config["vote_method"])
    aggregation = overrides.get("aggregation", config["aggregation"])
    min_confidence = overrides.get("min_confidence", config["min_confidence"])
    if min_confidence < config["min_confidence"]:
        raise UnsupportedOverrideError(
            f"min_confidence can only be raised: run used {config['min_confidence']}, "
            f"requested {min_confidence} (lower-confidence proposals were never scored)"
        )

    label_counts = {label: 0 for label in taxonomy.classes}
    moved = []
    for rec in load_run_records(run_dir):
        new_label = _replay_decision(rec, taxonomy, method, aggregation, min_confidence)
        label_counts[new_label] += 1
        if new_label != rec["final_label"]:
            moved.append({
                "image_id": rec["image_id"],
                "from": rec["final_label"],
                "to": new_label,
            })
    return {
        "run_id": record.get("run_id", ""),
        "overrides": {
            "vote_method": method,
            "aggregation": aggregation,
            "min_confidence": min_confidence,
        },
        "label_counts": label_counts,
        "moved": moved,
    }


def export_for_dir(run_dir: str | Path, format: str = "records") -> str:
    """Active decisions plus history, as ndjson records or VOC-style XML."""
    record = read_run_record(run_dir)
    run_id = record.get("run_id", "")
    history, active = read_decisions(run_dir)
    if format == "records":
        lines = [json.dumps({
            "record": "header",
            "run_id": run_id,
            "n_decisions": len(history),
            "n_active": len(active),
        }, sort_keys=True)]
        for entry in history:
            payload = {"record": "decision", "active": active[entry["image_id"]] is entry}
            payload.update(entry)
            lines.append(json.dumps(payload, sort_keys=True))
        return "\n".join(lines) + "\n"
    if format == "xml":
        catalog = load_run_catalog(run_dir)
        boxes_by_image = {
            rec["image_id"]: rec.get("boxes", []) for rec in load_run_records(run_dir)
        }
        parts = ["<annotations>"]
        for image_id in sorted(active):
            decision = active[image_id]
            image = catalog.get(image_id)
            boxes = tuple(
                (BoundingBox(*entry["box"]), decision["decided_label"])
                for entry in boxes_by_image.get(image_id, [])
            )
            annotation = Annotation(image_id=image_id, boxes=boxes, label_set="wild")
            parts.append(annotation_to_xml(annotation, image).rstrip("\n"))
        parts.append("</annotations>")
        return "\n".join(parts) + "\n"
    raise DataError(f"unknown export format {format!r}; use 'records' or 'xml'")


def replay_decisions(log_lines: Iterable[str]) -> tuple[list[dict], dict[str, dict]]:
    """Rebuild (history, active-by-image) purely from the append-only log."""
    history = []
    active: dict[str, dict] = {}
    for line in log_lines:
        if not line.strip():
            continue
        record = json.loads(line)
        history.append(record)
        active[record["image_id"]] = record
    return history, active


class RunStore:
    """Filesystem-backed store; one directory per run under ``runs/``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / RUNS_DIR).mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def run_dir(self, run_id: str) -> Path:
        directory = self.root / RUNS_DIR / run_id
        if not directory.exists():
            known = sorted(p.name for p in (self.root / RUNS_DIR).iterdir() if p.is_dir())
            raise DataError(f"unknown run {run_id!r}; known runs: {known}")
        return directory

    def _next_run_id(self) -> str:
        existing = [p.name for p in (self.root / RUNS_DIR).iterdir() if p.is_dir()]
        return f"run-{len(existing) + 1:04d}"

    def create_run(
        self,
        manifest_path: str | Path,
        config: PipelineConfig,
        *,
        run_id: Optional[str] = None,
    ) -> str:
        catalog = ingest_manifest(manifest_path)
        run = run_pipeline(catalog, config)
        with self._write_lock:
            run_id = run_id or self._next_run_id()
            target = self.root / RUNS_DIR / run_id
            if target.exists():
                raise DataError(f"run {run_id!r} already exists")
            persist_run(target, catalog, config, run, run_id=run_id)
        return run_id

    def run_record(self, run_id: str) -> dict:
        return read_run_record(self.run_dir(run_id))

    def taxonomy(self, run_id: str) -> ClassTaxonomy:
        return ClassTaxonomy.from_dict(self.run_record(run_id)["taxonomy"])

    def records(self, run_id: str) -> list[dict]:
        return load_run_records(self.run_dir(run_id))

    def catalog(self, run_id: str) -> Catalog:
        return load_run_catalog(self.run_dir(run_id))

    # -- decisions ---------------------------------------------------------

    def _decision_log(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "decisions.ndjson"

    def decisions(self, run_id: str) -> tuple[list[dict], dict[str, dict]]:
        return read_decisions(self.run_dir(run_id))

    def submit_decision(
        self,
        run_id: str,
        image_id: str,
        reviewer: str,
        decided_label: str,
        decided_at: Optional[str] = None,
    ) -> dict:
        """Append a decision; identical repeats acknowledge as duplicates."""
        taxonomy = self.taxonomy(run_id)
        if decided_label not in taxonomy.classes:
            raise DataError(
                f"label {decided_label!r} not in taxonomy {taxonomy.name!r}; "
                f"valid: {list(taxonomy.classes)}"
            )
        known_ids = {rec["image_id"] for rec in self.records(run_id)}
        if image_id not in known_ids:
            raise DataError(f"unknown image {image_id!r} in run {run_id}")

        with self._write_lock:
            _, active = self.decisions(run_id)
            current = active.get(image_id)
            if (
                current is not None
                and current["reviewer"] == reviewer
                and current["decided_label"] == decided_label
            ):
                return {"status": "duplicate", "decision": current}
            decision = ReviewDecision(
                image_id=image_id,
                reviewer=reviewer,
                decided_label=decided_label,
                decided_at=decided_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
                run_id=run_id,
            )
            with open(self._decision_log(run_id), "a", encoding="utf-8") as handle:
                handle.write(json.dumps(decision.to_dict(), sort_keys=True) + "\n")
            return {"status": "accepted", "decision": decision.to_dict()}

    # -- queue and stats ----------------------------------------------------

    def build_review_queue(
        self,
        run_id: str,
        label_filter: Optional[set[str]] = None,
    ) -> list[ReviewQueueEntry]:
        """Priority-ordered queue: wildcat first, strongest evidence first."""
        taxonomy = self.taxonomy(run_id)
        records = self.records(run_id)
        _, active = self.decisions(run_id)

        def wildcat_score(record: dict) -> float:
            best = 0.0
            for votes in [*record.get("box_votes", []), record.get("global_votes", [])]:
                for vote in votes:
                    best = max(best, float(vote["scores"][0]))
            return best

        scored = [(rec, wildcat_score(rec)) for rec in records]
        scored.sort(key=lambda pair: (
            taxonomy.priority(pair[0]["final_label"]),
            -pair[1],
            pair[0]["image_id"],
        ))
        segmented = self.run_record(run_id)["config"].get("segmentation", False)
        entries = []
        for rank, (record, score) in enumerate(scored, start=1):
            if label_filter and record["final_label"] not in label_filter:
                continue
            decision = active.get(record["image_id"])
            image_id = record["image_id"]
            artifacts = {"original": f"/images/{image_id}/artifacts?run={run_id}&kind=original"}
            if record.get("boxes"):
                artifacts["crop"] = (
                    f"/images/{image_id}/artifacts?run={run_id}&kind=crop&box=0"
                )
                if segmented:
                    artifacts["masked_crop"] = (
                        f"/images/{image_id}/artifacts?run={run_id}&kind=masked_crop&box=0"
                    )
            votes = [v for per_box in record.get("box_votes", []) for v in per_box]
            votes.extend(record.get("global_votes", []))
            entries.append(ReviewQueueEntry(
                image_id=image_id,
                final_label=record["final_label"],
                rank=rank,
                wildcat_score=score,
                reviewed=decision is not None,
                decided_label=decision["decided_label"] if decision else None,
                artifacts=artifacts,
                boxes=tuple(record.get("boxes", [])),
                votes=tuple(votes),
            ))
        return entries

    def stats(self, run_id: str) -> dict:
        from .evaluation import REVIEW_RATE_PER_MINUTE, estimate_review_savings

        record = self.run_record(run_id)
        taxonomy = self.taxonomy(run_id)
        records = self.records(run_id)
        history, active = self.decisions(run_id)
        label_counts = {label: 0 for label in taxonomy.classes}
        for rec in records:
            label_counts[rec["final_label"]] += 1
        savings = estimate_review_savings(
            [rec["final_label"] for rec in records], {taxonomy.lowest_priority})
        return {
            "run_id": run_id,
            "status": record["status"],
            "n_images": record["n_images"],
            "n_results": record["n_results"],
            "n_failures": record["n_failures"],
            "label_counts": label_counts,
            "decisions_total": len(history),
            "images_reviewed": len(active),
            "review_savings_minutes": savings,
            "review_rate_per_minute": REVIEW_RATE_PER_MINUTE,
        }

    # -- what-if and export --------------------------------------------------

    def whatif(self, run_id: str, overrides: Mapping) -> dict:
        return whatif_for_dir(self.run_dir(run_id), overrides)

    def export_decisions(self, run_id: str, format: str = "records") -> str:
        return export_for_dir(self.run_dir(run_id), format)

    # -- artifacts -------------------------------------------------------------

    def render_artifact(
        self,
        run_id: str,
        image_id: str,
        kind: str,
        box_index: int = 0,
    ) -> bytes:
        """PNG bytes for the original frame, a crop, or a masked crop."""
        from . import imaging
        from .backends import build_backend
        from .stages import BackendDescriptor

        record = self.run_record(run_id)
        catalog = self.catalog(run_id)
        image = catalog.get(image_id)
        pixels = imaging.load_pixels(image, catalog)
        if kind == "original":
            return imaging.encode_png(pixels)

        rec = next((r for r in self.records(run_id) if r["image_id"] == image_id), None)
        if rec is None or box_index >= len(rec.get("boxes", [])):
            raise DataError(f"no stored box {box_index} for image {image_id!r}")
        box = BoundingBox(*rec["boxes"][box_index]["box"])
        config = record["config"]
        crop = crop_to_box(pixels, box, config.get("pad_frac", 0.0))
        if kind == "crop":
            return imaging.encode_png(crop)
        if kind == "masked_crop":
            if not config.get("segmentation") or not config.get("segmenter"):
                raise DataError(f"run {run_id} did not use segmentation")
            segmenter = build_backend(BackendDescriptor.from_dict(config["segmenter"]))
            mask = segmenter.segment(crop, f"{image_id}:{box_index}")
            return imaging.encode_png(
                composite_mask(crop, mask, tuple(config.get("fill", (128, 128, 128)))))
        raise DataError(f"unknown artifact kind {kind!r}")


def _replay_decision(
    record: Mapping,
    taxonomy: ClassTaxonomy,
    method: str,
    aggregation: str,
    min_confidence: float,
) -> str:
    box_votes = []
    for entry, votes in zip(record.get("boxes", []), record.get("box_votes", [])):
        proposal = RegionProposal(
            box=BoundingBox(*entry["box"]),
            confidence=float(entry["confidence"]),
            detector_class=str(entry.get("detector_class", "")),
        )
        box_votes.append(BoxVotes(
            proposal=proposal,
            votes=tuple(
                Vote(
                    model_id=v["model_id"], scale=v["scale"],
                    scores=ClassScores(taxonomy=taxonomy.name, scores=tuple(v["scores"])),
                    argmax_label=v["label"], box_index=v["box_index"],
                )
                for v in votes
            ),
        ))
    global_votes = [
        Vote(
            model_id=v["model_id"], scale=v["scale"],
            scores=ClassScores(taxonomy=taxonomy.name, scores=tuple(v["scores"])),
            argmax_label=v["label"], box_index=None,
        )
        for v in record.get("global_votes", [])
    ]
    final, _ = decide_image(
        record["image_id"], box_votes, global_votes, taxonomy,
        method=method, policy=aggregation, min_confidence=min_confidence,
    )
    return final.final_label


# ---------------------------------------------------------------------------
# HTTP application


def create_app(store: RunStore, *, token: Optional[str] = None):
    """FastAPI app over a RunStore; set ``token`` to require bearer auth."""
    from fastapi import Depends, FastAPI, HTTPException, Request, Response

    app = FastAPI(title="wildtriage review service")

    def authorized(request: Request) -> None:
        if token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid token")

    def _guard(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except UnsupportedOverrideError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except DataError as exc:
            status = 404 if "unknown run" in str(exc) or "unknown image" in str(exc) else 400
            raise HTTPException(status_code=status, detail=str(exc)) from exc

    @app.post("/runs")
    def start_run(body: dict, _=Depends(authorized)):
        manifest = body.get("manifest")
        config_spec = body.get("config")
        if not manifest or config_spec is None:
            raise HTTPException(status_code=400, detail="body needs 'manifest' and 'config'")
        if isinstance(config_spec, str):
            config_spec = json.loads(Path(config_spec).read_text(encoding="utf-8"))
        config = PipelineConfig.from_dict(config_spec)
        run_id = _guard(store.create_run, manifest, config, run_id=body.get("run_id"))
        return store.run_record(run_id)

    @app.get("/runs/{run_id}")
    def get_run(run_id: str, _=Depends(authorized)):
        return _guard(store.run_record, run_id)

    @app.get("/runs/{run_id}/queue")
    def get_queue(run_id: str, filter: Optional[str] = None, page: int = 0,
                  page_size: int = 50, _=Depends(authorized)):
        labels = set(filter.split(",")) if filter else None
        entries = _guard(store.build_review_queue, run_id, labels)
        start = page * page_size
        return {
            "run_id": run_id,
            "total": len(entries),
            "page": page,
            "page_size": page_size,
            "entries": [e.to_dict() for e in entries[start:start + page_size]],
        }

    @app.post("/runs/{run_id}/decisions")
    def post_decision(run_id: str, body: dict, _=Depends(authorized)):
        for field_name in ("image_id", "reviewer", "decided_label"):
            if field_name not in body:
                raise HTTPException(status_code=400, detail=f"body needs {field_name!r}")
        return _guard(
            store.submit_decision, run_id,
            body["image_id"], body["reviewer"], body["decided_label"],
            body.get("decided_at"),
        )

    @app.get("/runs/{run_id}/stats")
    def get_stats(run_id: str, _=Depends(authorized)):
        return _guard(store.stats, run_id)

    @app.get("/runs/{run_id}/whatif")
    def get_whatif(run_id: str, method: Optional[str] = None,
                   min_conf: Optional[float] = None,
                   aggregation: Optional[str] = None, _=Depends(authorized)):
        overrides: dict = {}
        if method is not None:
            overrides["vote_method"] = method
        if min_conf is not None:
            overrides["min_confidence"] = min_conf
        if aggregation is not None:
            overrides["aggregation"] = aggregation
        return _guard(store.whatif, run_id, overrides)

    @app.get("/runs/{run_id}/export")
    def get_export(run_id: str, format: str = "records", _=Depends(authorized)):
        payload = _guard(store.export_decisions, run_id, format)
        media = "application/xml" if format == "xml" else "application/x-ndjson"
        return Response(content=payload, media_type=media)

    @app.get("/images/{image_id}/artifacts")
    def get_artifacts(image_id: str, run: str, kind: Optional[str] = None,
                      box: int = 0, _=Depends(authorized)):
        if kind is None:
            record = next(
                (r for r in _guard(store.records, run) if r["image_id"] == image_id), None)
            if record is None:
                raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
            available = {"original": f"/images/{image_id}/artifacts?run={run}&kind=original"}
            for index in range(len(record.get("boxes", []))):
                available[f"crop[{index}]"] = (
                    f"/images/{image_id}/artifacts?run={run}&kind=crop&box={index}"
                )
                if store.run_record(run)["config"].get("segmentation"):
                    available[f"masked_crop[{index}]"] = (
                        f"/images/{image_id}/artifacts?run={run}&kind=masked_crop&box={index}"
                    )
            return available
        png = _guard(store.render_artifact, run, image_id, kind, box)
        return Response(content=png, media_type="image/png")

    return app
