"""Synthetic fixture generation for tests, benchmarks, and demo runs.

Everything is derived from (seed, image_id) digests: scene pixels, labels,
detector proposals, and classifier score tables all agree with each other
without any stored binary data. Camera 3 shoots eight frames per activation,
cameras 1 and 2 shoot three, so burst grouping sees realistic structure.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

from . import imaging
from .catalog import (
    Annotation,
    CameraTrapImage,
    Catalog,
    annotation_to_xml,
)
from .curation import (
    ANIMAL_OTHER,
    ANIMAL_UNKNOWN,
    BACKGROUND,
    BUILTIN_TAXONOMIES,
    FOUR_CLASS,
    TWO_CLASS,
    WILDCAT_DAY,
    WILDCAT_NIGHT,
    ClassTaxonomy,
)

CAMERA_SPECS = {
    "1": {"burst": 3, "size": (96, 72)},
    "2": {"burst": 3, "size": (80, 60)},
    "3": {"burst": 8, "size": (112, 84)},
}

LOCAL_MODELS = ("local-a", "local-b", "local-c")
GLOBAL_MODELS = ("global-a", "global-b", "global-c")

FIXTURE_TAXONOMIES = ("four-class", "five-class", "two-class")

# Models agree with the derived truth at these rates; global context is noisier.
LOCAL_HIT_RATE = 0.8
GLOBAL_HIT_RATE = 0.6


def _digest(*parts) -> bytes:
    return hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()


@dataclass
class FixturePaths:
    root: Path
    manifest: Path
    experiment_config: Path
    annotations_set1: Path
    annotations_set2: Path
    backends_dir: Path


def _base_label(seed: int, image_id: str, infrared: bool, has_subject: bool) -> str:
    """The scene's set-1 ground truth in the five-class label space."""
    if not has_subject:
        return BACKGROUND
    byte = _digest(seed, image_id, "label")[0]
    if byte < 102:  # ~40% wildcat
        return WILDCAT_NIGHT if infrared else WILDCAT_DAY
    if byte < 179:  # ~30% other animals
        return ANIMAL_OTHER
    return ANIMAL_UNKNOWN


def _set2_label(seed: int, image_id: str, set1_label: str) -> str:
    """Stricter relabelling: a quarter of wildcats lose their features."""
    if set1_label in (WILDCAT_DAY, WILDCAT_NIGHT):
        if _digest(seed, image_id, "set2")[0] < 64:
            return ANIMAL_UNKNOWN
    return set1_label


def _label_in(taxonomy: ClassTaxonomy, base_label: str) -> str:
    if taxonomy.name == "five-class":
        return base_label
    four = FOUR_CLASS.map_label(base_label)
    if taxonomy.name == "four-class":
        return four
    return TWO_CLASS.map_label(four)


def _proposals_for(seed: int, image_id: str, spec: imaging.SceneSpec) -> list[dict]:
    digest = _digest(seed, image_id, "detect")
    proposals = []
    if spec.rects and digest[0] >= 13:  # ~5% missed detections
        for index, box in enumerate(spec.rect_boxes()):
            confidence = round(0.55 + 0.44 * digest[1 + index] / 255, 4)
            proposals.append({
                "box": list(box.as_tuple()),
                "confidence": confidence,
                "class": "animal",
            })
    if digest[4] < 26:  # ~10% spurious low-confidence boxes
        w = 0.08 + 0.1 * digest[5] / 255
        h = 0.08 + 0.1 * digest[6] / 255
        x0 = (1.0 - w) * digest[7] / 255
        y0 = (1.0 - h) * digest[8] / 255
        proposals.append({
            "box": [round(x0, 4), round(y0, 4), round(x0 + w, 4), round(y0 + h, 4)],
            "confidence": round(0.15 + 0.15 * digest[9] / 255, 4),
            "class": "vehicle",
        })
    return proposals


def _scores_for(
    seed: int,
    image_id: str,
    model_id: str,
    taxonomy: ClassTaxonomy,
    true_label: str,
    hit_rate: float,
) -> list[float]:
    digest = _digest(seed, image_id, model_id, taxonomy.name)
    k = len(taxonomy)
    true_index = taxonomy.priority(true_label)
    if digest[0] < int(hit_rate * 256) or k == 1:
        winner = true_index
    else:
        winner = (true_index + 1 + digest[1] % (k - 1)) % k
    top = round(0.5 + 0.45 * digest[2] / 255, 6)
    rest = round((1.0 - top) / (k - 1), 6) if k > 1 else 0.0
    scores = [rest] * k
    scores[winner] = round(1.0 - rest * (k - 1), 6)
    return scores


def build_fixture(out_dir: str | Path, n_images: int = 200, seed: int = 7) -> FixturePaths:
    """Write a complete synthetic fixture tree and return its paths."""
    root = Path(out_dir)
    set1_dir = root / "annotations" / "set1"
    set2_dir = root / "annotations" / "set2"
    backends_dir = root / "backends"
    for directory in (set1_dir, set2_dir, backends_dir):
        directory.mkdir(parents=True, exist_ok=True)

    base_time = datetime(2021, 6, 1, 0, 0, 0)
    images: list[CameraTrapImage] = []
    activation = {camera: 0 for camera in CAMERA_SPECS}
    while len(images) < n_images:
        for camera, spec in CAMERA_SPECS.items():
            if len(images) >= n_images:
                break
            cycle = activation[camera]
            activation[camera] += 1
            start = base_time + timedelta(seconds=600 * cycle + 60 * int(camera))
            for frame in range(spec["burst"]):
                if len(images) >= n_images:
                    break
                image_id = f"c{camera}i{len(images):04d}"
                width, height = spec["size"]
                scene_key = f"{seed}/{image_id}"
                scene = imaging.scene_spec(width, height, scene_key)
                images.append(CameraTrapImage(
                    image_id=image_id,
                    camera_id=camera,
                    captured_at=start + timedelta(seconds=2 * frame),
                    file_ref=imaging.synthetic_ref(scene_key),
                    width_px=width,
                    height_px=height,
                    source="captivity",
                    is_infrared=scene.infrared,
                ))

    images.sort(key=lambda im: (im.camera_id, im.captured_at, im.image_id))
    catalog = Catalog(images=tuple(images), root=root)
    manifest_path = root / "manifest.csv"
    manifest_path.write_text(catalog.to_manifest_text(), encoding="utf-8")

    detections: dict[str, list[dict]] = {}
    base_labels: dict[str, str] = {}
    for image in images:
        scene_key = image.file_ref[len(imaging.SYNTHETIC_PREFIX):]
        scene = imaging.scene_spec(image.width_px, image.height_px, scene_key)
        label1 = _base_label(seed, image.image_id, scene.infrared, bool(scene.rects))
        base_labels[image.image_id] = label1
        label2 = _set2_label(seed, image.image_id, label1)
        boxes1 = tuple((box, label1) for box in scene.rect_boxes())
        boxes2 = tuple((box, label2) for box in scene.rect_boxes())
        ann1 = Annotation(image_id=image.image_id, boxes=boxes1, label_set="set1")
        ann2 = Annotation(image_id=image.image_id, boxes=boxes2, label_set="set2")
        (set1_dir / f"{image.image_id}.xml").write_text(
            annotation_to_xml(ann1, image), encoding="utf-8")
        (set2_dir / f"{image.image_id}.xml").write_text(
            annotation_to_xml(ann2, image), encoding="utf-8")
        detections[image.image_id] = _proposals_for(seed, image.image_id, scene)

    detections_path = backends_dir / "detections.json"
    detections_path.write_text(
        json.dumps(detections, sort_keys=True, indent=1), encoding="utf-8")

    classifier_entries: dict[str, dict[str, list[dict]]] = {}
    for taxonomy_name in FIXTURE_TAXONOMIES:
        taxonomy = BUILTIN_TAXONOMIES[taxonomy_name]
        slots: dict[str, list[dict]] = {"local": [], "global": []}
        for scale, models, hit_rate in (
            ("local", LOCAL_MODELS, LOCAL_HIT_RATE),
            ("global", GLOBAL_MODELS, GLOBAL_HIT_RATE),
        ):
            for model_id in models:
                table = {
                    image.image_id: _scores_for(
                        seed, image.image_id, model_id, taxonomy,
                        _label_in(taxonomy, base_labels[image.image_id]), hit_rate,
                    )
                    for image in images
                }
                filename = f"scores_{taxonomy_name}_{model_id}.json"
                (backends_dir / filename).write_text(
                    json.dumps({"classes": len(taxonomy), "scores": table},
                               sort_keys=True, indent=1),
                    encoding="utf-8",
                )
                slots[scale].append({
                    "kind": "fixture",
                    "role": "classifier",
                    "config": {
                        "scores_file": f"backends/{filename}",
                        "model_id": model_id,
                        "resolution": 64,
                    },
                })
        classifier_entries[taxonomy_name] = slots
    # the unknown-dropping two-class variant scores with the two-class models
    classifier_entries["two-class-no-unknown"] = classifier_entries["two-class"]

    experiment_config = {
        "manifest": "manifest.csv",
        "annotations": {"set1": "annotations/set1", "set2": "annotations/set2"},
        "burst_policy": {"gap_seconds": 5.0},
        "split": {"fractions": [0.7, 0.2, 0.1], "seed": 42},
        "experiments": [
            "T2_burst", "T2_holdout(1)", "T2_holdout(2)", "T2_holdout(3)",
            "T3", "T4_hier", "T4_best", "T6a", "T6b", "T7",
            "T8a", "T8b", "T8c",
        ],
        "detector": {
            "kind": "fixture",
            "role": "detector",
            "config": {"proposals_file": "backends/detections.json"},
        },
        "segmenter": {"kind": "heuristic_stub", "role": "segmenter", "config": {}},
        "classifiers": classifier_entries,
        "pipeline": {
            "min_confidence": 0.1,
            "pad_frac": 0.0,
            "fill": [128, 128, 128],
            "seed": seed,
        },
    }
    config_path = root / "experiment.json"
    config_path.write_text(
        json.dumps(experiment_config, sort_keys=True, indent=1), encoding="utf-8")

    return FixturePaths(
        root=root,
        manifest=manifest_path,
        experiment_config=config_path,
        annotations_set1=set1_dir,
        annotations_set2=set2_dir,
        backends_dir=backends_dir,
    )


def synthetic_catalog(n_images: int, width: int, height: int, seed: int = 0) -> Catalog:
    """In-memory catalog of synthetic scenes; no files are written.

    Used for throughput benchmarks where materializing pixels on disk would
    dwarf the pipeline cost being measured.
    """
    base_time = datetime(2021, 6, 1, 0, 0, 0)
    images = []
    for index in range(n_images):
        image_id = f"bench{index:06d}"
        key = f"{seed}/{image_id}"
        images.append(CameraTrapImage(
            image_id=image_id,
            camera_id="bench",
            captured_at=base_time + timedelta(seconds=10 * index),
            file_ref=imaging.synthetic_ref(key),
            width_px=width,
            height_px=height,
            source="captivity",
            is_infrared=imaging.scene_spec(width, height, key).infrared,
        ))
    return Catalog(images=tuple(images), root=Path("."))
