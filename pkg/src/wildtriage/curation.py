"""Leakage-safe splits, background box sampling, crops, and taxonomy remaps.

Everything here is pure given (inputs, seed). Randomized operations derive a
per-image RNG stream from (seed, image_id) so results cannot depend on worker
count or visit order.
"""

from __future__ import annotations

import hashlib
import json
import random
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .catalog import Annotation, BoundingBox, Burst, CameraTrapImage
from .errors import DataError, SamplingExhaustedWarning, SplitError, TaxonomyError

SPLIT_NAMES = ("train", "val", "test")

# Remap target that removes a label's boxes instead of renaming them.
DROP = "DROP"

# Canonical class labels. Index order in a taxonomy is priority order:
# a wildcat must never lose a vote to anything below it.
WILDCAT = "Wildcat"
WILDCAT_DAY = "WildcatDay"
WILDCAT_NIGHT = "WildcatNight"
NOT_WILDCAT = "NotWildcat"
ANIMAL_OTHER = "AnimalOther"
ANIMAL_UNKNOWN = "AnimalUnknown"
BACKGROUND = "Background"

DEFAULT_BG_SIZE_RANGE = (0.1, 0.5)
DEFAULT_BG_ATTEMPTS = 1000


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class list; index 0 is the highest-priority class.

    ``remap`` translates a parent taxonomy's labels into this one (or DROP).
    """

    name: str
    classes: tuple[str, ...]
    remap: Optional[Mapping[str, str]] = None

    def __post_init__(self) -> None:
        if len(set(self.classes)) != len(self.classes):
            raise TaxonomyError(f"{self.name}: duplicate class labels")
        if not self.classes:
            raise TaxonomyError(f"{self.name}: empty class list")
        if self.remap is not None:
            bad = [t for t in self.remap.values() if t != DROP and t not in self.classes]
            if bad:
                raise TaxonomyError(f"{self.name}: remap targets outside taxonomy: {bad}")

    def __len__(self) -> int:
        return len(self.classes)

    def priority(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise TaxonomyError(f"label {label!r} not in taxonomy {self.name!r}") from None

    @property
    def lowest_priority(self) -> str:
        return self.classes[-1]

    def map_label(self, label: str) -> str:
        """Translate a parent label into this taxonomy (may return DROP)."""
        if self.remap is None:
            if label not in self.classes:
                raise TaxonomyError(
                    f"label {label!r} not covered by taxonomy {self.name!r}"
                )
            return label
        if label not in self.remap:
            raise TaxonomyError(
                f"label {label!r} not covered by remap of taxonomy {self.name!r}"
            )
        return self.remap[label]

    def to_dict(self) -> dict:
        out: dict = {"name": self.name, "classes": list(self.classes)}
        if self.remap is not None:
            out["remap"] = dict(self.remap)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ClassTaxonomy":
        return cls(
            name=data["name"],
            classes=tuple(data["classes"]),
            remap=dict(data["remap"]) if data.get("remap") else None,
        )


FIVE_CLASS = ClassTaxonomy(
    name="five-class",
    classes=(WILDCAT_DAY, WILDCAT_NIGHT, ANIMAL_OTHER, ANIMAL_UNKNOWN, BACKGROUND),
)

FOUR_CLASS = ClassTaxonomy(
    name="four-class",
    classes=(WILDCAT, ANIMAL_OTHER, ANIMAL_UNKNOWN, BACKGROUND),
    remap={
        WILDCAT_DAY: WILDCAT,
        WILDCAT_NIGHT: WILDCAT,
        ANIMAL_OTHER: ANIMAL_OTHER,
        ANIMAL_UNKNOWN: ANIMAL_UNKNOWN,
        BACKGROUND: BACKGROUND,
    },
)

TWO_CLASS = ClassTaxonomy(
    name="two-class",
    classes=(WILDCAT, NOT_WILDCAT),
    remap={
        WILDCAT: WILDCAT,
        ANIMAL_OTHER: NOT_WILDCAT,
        ANIMAL_UNKNOWN: NOT_WILDCAT,
        BACKGROUND: NOT_WILDCAT,
    },
)

TWO_CLASS_NO_UNKNOWN = ClassTaxonomy(
    name="two-class-no-unknown",
    classes=(WILDCAT, NOT_WILDCAT),
    remap={
        WILDCAT: WILDCAT,
        ANIMAL_OTHER: NOT_WILDCAT,
        ANIMAL_UNKNOWN: DROP,
        BACKGROUND: NOT_WILDCAT,
    },
)

BUILTIN_TAXONOMIES = {
    t.name: t for t in (FIVE_CLASS, FOUR_CLASS, TWO_CLASS, TWO_CLASS_NO_UNKNOWN)
}


def resolve_taxonomy(spec) -> ClassTaxonomy:
    """Accept a ClassTaxonomy, a builtin name, a dict, or a JSON file path."""
    if isinstance(spec, ClassTaxonomy):
        return spec
    if isinstance(spec, Mapping):
        return ClassTaxonomy.from_dict(spec)
    if isinstance(spec, str):
        if spec in BUILTIN_TAXONOMIES:
            return BUILTIN_TAXONOMIES[spec]
        path = Path(spec)
        if path.exists():
            return ClassTaxonomy.from_dict(json.loads(path.read_text(encoding="utf-8")))
        raise TaxonomyError(
            f"unknown taxonomy {spec!r}; builtins: {sorted(BUILTIN_TAXONOMIES)}"
        )
    raise TaxonomyError(f"cannot resolve taxonomy from {type(spec).__name__}")


@dataclass(frozen=True)
class SplitAssignment:
    assignment: Mapping[str, str]  # burst_id -> split name
    strategy: str
    seed: int

    def bursts_in(self, split: str) -> tuple[str, ...]:
        return tuple(sorted(b for b, s in self.assignment.items() if s == split))

    def split_of(self, burst_id: str) -> str:
        try:
            return self.assignment[burst_id]
        except KeyError:
            raise SplitError(f"burst {burst_id!r} has no split assignment") from None

    def image_ids_in(self, split: str, bursts: Sequence[Burst]) -> tuple[str, ...]:
        ids = []
        for burst in bursts:
            if self.assignment.get(burst.burst_id) == split:
                ids.extend(burst.image_ids)
        return tuple(ids)

    def to_text(self) -> str:
        lines = [f"{burst_id},{split}" for burst_id, split in sorted(self.assignment.items())]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str, *, strategy: str = "loaded", seed: int = 0) -> "SplitAssignment":
        assignment = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            burst_id, _, split = line.partition(",")
            if split not in SPLIT_NAMES:
                raise SplitError(f"unknown split {split!r} for burst {burst_id!r}")
            assignment[burst_id] = split
        return cls(assignment=assignment, strategy=strategy, seed=seed)


def derived_rng(seed: int, *parts: str) -> random.Random:
    """Stable per-item RNG stream, independent of visit order and platform."""
    material = hashlib.sha256(
        ("|".join([str(seed), *parts])).encode("utf-8")
    ).digest()
    return random.Random(int.from_bytes(material[:8], "big"))


def _validate_fractions(fractions: Sequence[float], count: int) -> None:
    if len(fractions) != count:
        raise SplitError(f"expected {count} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise SplitError(f"fractions must be non-negative: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1: {fractions}")


def _greedy_assign(
    bursts: Sequence[Burst],
    named_fractions: Sequence[tuple[str, float]],
    seed: int,
) -> dict[str, str]:
    """Largest-deficit-first assignment, measured in image count.

    Zero-fraction splits never receive bursts. Ties go to the earlier split
    name so results are total-order deterministic.
    """
    ordered = sorted(bursts, key=lambda b: b.burst_id)
    random.Random(seed).shuffle(ordered)
    total = sum(len(b) for b in ordered)
    active = [(name, frac * total) for name, frac in named_fractions if frac > 0]
    if not active:
        raise SplitError("all fractions are zero")
    deficits = {name: target for name, target in active}
    assignment: dict[str, str] = {}
    for burst in ordered:
        best = max(active, key=lambda item: deficits[item[0]])[0]
        assignment[burst.burst_id] = best
        deficits[best] -= len(burst)
    return assignment


def burst_split(
    bursts: Sequence[Burst],
    fractions: tuple[float, float, float],
    seed: int,
) -> SplitAssignment:
    """Shuffle bursts with a seeded RNG, then assign greedily by image-count deficit.

    No burst ever spans splits; achieved proportions approach ``fractions``
    to within the largest burst size.
    """
    if not bursts:
        raise SplitError("cannot split an empty burst list")
    _validate_fractions(fractions, 3)
    assignment = _greedy_assign(bursts, list(zip(SPLIT_NAMES, fractions)), seed)
    return SplitAssignment(assignment=assignment, strategy="burst_based", seed=seed)


def camera_holdout_split(
    bursts: Sequence[Burst],
    holdout_camera: str,
    fractions_train_val: tuple[float, float],
    seed: int,
) -> SplitAssignment:
    """Reserve one camera's bursts entirely for test; burst-split the rest."""
    if not bursts:
        raise SplitError("cannot split an empty burst list")
    cameras = sorted({b.camera_id for b in bursts})
    if holdout_camera not in cameras:
        raise SplitError(
            f"unknown camera {holdout_camera!r}; known cameras: {', '.join(cameras)}"
        )
    _validate_fractions(fractions_train_val, 2)
    held = [b for b in bursts if b.camera_id == holdout_camera]
    rest = [b for b in bursts if b.camera_id != holdout_camera]
    assignment = {b.burst_id: "test" for b in held}
    if rest:
        train_frac, val_frac = fractions_train_val
        assignment.update(
            burst_split(rest, (train_frac, val_frac, 0.0), seed).assignment
        )
    return SplitAssignment(
        assignment=assignment,
        strategy=f"camera_holdout:{holdout_camera}",
        seed=seed,
    )


def _pixel_extent_outward(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    import math

    return (
        math.floor(box.x_min * width),
        math.floor(box.y_min * height),
        math.ceil(box.x_max * width),
        math.ceil(box.y_max * height),
    )


def sample_background_boxes(
    image: CameraTrapImage,
    gt_boxes: Sequence[BoundingBox],
    n: int,
    size_range: tuple[float, float] = DEFAULT_BG_SIZE_RANGE,
    seed: int = 0,
    *,
    attempts_per_box: int = DEFAULT_BG_ATTEMPTS,
) -> list[BoundingBox]:
    """Rejection-sample boxes with zero pixel overlap against every gt box.

    Returns fewer than ``n`` boxes (with a SamplingExhaustedWarning) when the
    retry budget runs out; callers that need all ``n`` should treat that as
    an error.
    """
    if n < 0:
        raise DataError(f"n must be >= 0, got {n}")
    min_frac, max_frac = size_range
    if not (0.0 < min_frac <= max_frac <= 1.0):
        raise DataError(f"invalid size_range {size_range}")

    width, height = image.width_px, image.height_px
    forbidden = [_pixel_extent_outward(b, width, height) for b in gt_boxes]
    rng = derived_rng(seed, image.image_id)

    w_lo = max(1, round(min_frac * width))
    w_hi = max(w_lo, round(max_frac * width))
    h_lo = max(1, round(min_frac * height))
    h_hi = max(h_lo, round(max_frac * height))

    sampled: list[BoundingBox] = []
    for _ in range(n):
        placed = False
        for _ in range(attempts_per_box):
            w = rng.randint(w_lo, w_hi)
            h = rng.randint(h_lo, h_hi)
            x0 = rng.randint(0, width - w)
            y0 = rng.randint(0, height - h)
            x1, y1 = x0 + w, y0 + h
            clash = any(
                x0 < fx1 and fx0 < x1 and y0 < fy1 and fy0 < y1
                for fx0, fy0, fx1, fy1 in forbidden
            )
            if not clash:
                sampled.append(BoundingBox.from_pixels(x0, y0, x1, y1, width, height))
                placed = True
                break
        if not placed:
            warnings.warn(
                f"{image.image_id}: found {len(sampled)} of {n} background boxes "
                f"within {attempts_per_box} attempts each",
                SamplingExhaustedWarning,
                stacklevel=2,
            )
            break
    return sampled


def remap_taxonomy(
    annotations: Iterable[Annotation],
    target: ClassTaxonomy,
) -> list[Annotation]:
    """Rewrite labels per the target's remap; DROP removes boxes.

    Annotations left with zero boxes survive as empty (background) records.
    """
    out = []
    for ann in annotations:
        boxes = []
        for box, label in ann.boxes:
            mapped = target.map_label(label)
            if mapped == DROP:
                continue
            boxes.append((box, mapped))
        out.append(Annotation(image_id=ann.image_id, boxes=tuple(boxes),
                              label_set=ann.label_set))
    return out


def derive_image_labels(
    image_ids: Iterable[str],
    annotations: Mapping[str, Annotation],
    taxonomy: ClassTaxonomy,
) -> dict[str, str]:
    """Image-level ground truth: highest-priority boxed label, else background."""
    labels = {}
    for image_id in image_ids:
        ann = annotations.get(image_id)
        if ann is None or not ann.boxes:
            labels[image_id] = taxonomy.lowest_priority
        else:
            labels[image_id] = min(ann.labels(), key=taxonomy.priority)
    return labels


def crop_to_box(pixels: np.ndarray, box: BoundingBox, pad_frac: float = 0.0) -> np.ndarray:
    """Cut the denormalized, padded box out of an HxWxC array, clamped to it."""
    if pad_frac < 0:
        raise DataError(f"pad_frac must be >= 0, got {pad_frac}")
    height, width = pixels.shape[:2]
    x0, y0, x1, y1 = box.to_pixels(width, height)
    pad_x = round(pad_frac * (x1 - x0))
    pad_y = round(pad_frac * (y1 - y0))
    x0 = max(0, x0 - pad_x)
    y0 = max(0, y0 - pad_y)
    x1 = min(width, x1 + pad_x)
    y1 = min(height, y1 + pad_y)
    if x0 >= x1 or y0 >= y1:
        raise DataError(f"box {box.as_tuple()} denormalizes to zero pixels at {width}x{height}")
    return pixels[y0:y1, x0:x1].copy()
