"""Per-image inference stages behind pluggable backends.

Region proposal, mask compositing, and classification are kept free of any
neural-network code: trained models live behind the backend contract in
``backends``, and deterministic fixtures or heuristic stubs stand in for
them everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .catalog import BoundingBox, CameraTrapImage
from .curation import ClassTaxonomy
from .errors import ConfigurationError, DataError, ProtocolError, StageError

BACKEND_KINDS = ("fixture", "heuristic_stub", "external_process")
BACKEND_ROLES = ("detector", "segmenter", "classifier")

DEFAULT_MIN_CONFIDENCE = 0.1
DEFAULT_FILL = (128, 128, 128)
DEFAULT_RESOLUTION = 224

# Allowed config keys per (kind, role); None means any role for that kind.
_CONFIG_KEYS: dict[tuple[str, Optional[str]], set[str]] = {
    ("fixture", "detector"): {"proposals", "proposals_file"},
    ("fixture", "classifier"): {"scores", "scores_file", "model_id", "classes", "resolution"},
    ("fixture", "segmenter"): {"masks", "masks_file"},
    ("heuristic_stub", "detector"): {"stride", "dark_offset", "min_area_frac"},
    ("heuristic_stub", "classifier"): {"threshold", "confidence", "model_id", "resolution"},
    ("heuristic_stub", "segmenter"): {"offset"},
    ("external_process", None): {"command", "timeout", "model_id", "classes", "resolution"},
}


@dataclass(frozen=True)
class RegionProposal:
    """A detector box forwarded regardless of the detector's own label."""

    box: BoundingBox
    confidence: float
    detector_class: str = ""

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise DataError(f"proposal confidence {self.confidence} outside [0,1]")


@dataclass(frozen=True, eq=False)
class Mask:
    """Per-pixel foreground bitmap matching one crop."""

    width: int
    height: int
    bitmap: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.bitmap.dtype != np.bool_:
            raise DataError(f"mask bitmap must be boolean, got {self.bitmap.dtype}")
        if self.bitmap.shape != (self.height, self.width):
            raise DataError(
                f"mask bitmap shape {self.bitmap.shape} does not match "
                f"{self.height}x{self.width}"
            )

    @classmethod
    def full(cls, width: int, height: int, value: bool = True) -> "Mask":
        return cls(width=width, height=height,
                   bitmap=np.full((height, width), value, dtype=bool))


@dataclass(frozen=True)
class ClassScores:
    """A probability vector aligned with a taxonomy's class order."""

    taxonomy: str
    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(not (0.0 <= s <= 1.0) for s in self.scores):
            raise DataError(f"scores outside [0,1]: {self.scores}")
        if abs(sum(self.scores) - 1.0) > 1e-6:
            raise DataError(f"scores sum to {sum(self.scores)}, not 1")


@dataclass(frozen=True)
class BackendDescriptor:
    """A pluggable slot for a detector, segmenter, or classifier."""

    kind: str
    role: str
    config: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigurationError(f"unknown backend kind {self.kind!r}")
        if self.role not in BACKEND_ROLES:
            raise ConfigurationError(f"unknown backend role {self.role!r}")
        allowed = _CONFIG_KEYS.get((self.kind, self.role)) or _CONFIG_KEYS.get((self.kind, None))
        unknown = set(self.config) - allowed
        if unknown:
            raise ConfigurationError(
                f"{self.kind}/{self.role}: unknown config keys {sorted(unknown)}; "
                f"allowed: {sorted(allowed)}"
            )
        if self.kind == "external_process" and "command" not in self.config:
            raise ConfigurationError(f"external_process/{self.role}: config requires 'command'")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "role": self.role, "config": dict(self.config)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackendDescriptor":
        return cls(kind=data["kind"], role=data["role"], config=dict(data.get("config", {})))

    def version(self) -> str:
        import hashlib
        import json

        digest = hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True, default=str).encode("utf-8")
        ).hexdigest()[:12]
        return f"{self.kind}/{self.role}@{digest}"


def detect_regions(
    backend,
    image: CameraTrapImage,
    min_confidence: float,
    pixels: Optional[np.ndarray] = None,
) -> list[RegionProposal]:
    """All proposals at or above the threshold, in a stable order.

    Sorted by descending confidence, then box coordinates. The detector's
    class strings ride along untouched; nothing downstream filters on them.
    """
    if backend.role != "detector":
        raise ConfigurationError(f"detect_regions needs a detector, got {backend.role}")
    if not (0.0 <= min_confidence <= 1.0):
        raise ConfigurationError(f"min_confidence {min_confidence} outside [0,1]")
    proposals = backend.propose(image, pixels)
    kept = [p for p in proposals if p.confidence >= min_confidence]
    kept.sort(key=lambda p: (-p.confidence, p.box.as_tuple()))
    return kept


def composite_mask(crop: np.ndarray, mask: Mask, fill: Sequence[int] = DEFAULT_FILL) -> np.ndarray:
    """Keep crop pixels where the mask is foreground, fill value elsewhere."""
    if crop.shape[:2] != (mask.height, mask.width):
        raise StageError(
            f"mask {mask.width}x{mask.height} does not match crop "
            f"{crop.shape[1]}x{crop.shape[0]}"
        )
    fill_pixel = np.asarray(fill, dtype=crop.dtype)
    return np.where(mask.bitmap[:, :, None], crop, fill_pixel)


def letterbox(pixels: np.ndarray, resolution: int, fill: Sequence[int] = DEFAULT_FILL) -> np.ndarray:
    """Aspect-preserving nearest-neighbour resize onto a square fill canvas."""
    if resolution <= 0:
        raise ConfigurationError(f"resolution must be positive, got {resolution}")
    height, width = pixels.shape[:2]
    scale = resolution / max(height, width)
    new_h = max(1, round(height * scale))
    new_w = max(1, round(width * scale))
    rows = np.minimum((np.arange(new_h) / scale).astype(np.intp), height - 1)
    cols = np.minimum((np.arange(new_w) / scale).astype(np.intp), width - 1)
    resized = pixels[rows[:, None], cols[None, :]]
    canvas = np.empty((resolution, resolution, pixels.shape[2]), dtype=pixels.dtype)
    canvas[:] = np.asarray(fill, dtype=pixels.dtype)
    y_off = (resolution - new_h) // 2
    x_off = (resolution - new_w) // 2
    canvas[y_off:y_off + new_h, x_off:x_off + new_w] = resized
    return canvas


def classify(
    backend,
    pixels: np.ndarray,
    taxonomy: ClassTaxonomy,
    *,
    key: Optional[str] = None,
) -> ClassScores:
    """Run a classifier backend and normalize its output into ClassScores.

    Outputs off unit sum by more than 1e-3 are a protocol violation; smaller
    drift is renormalized silently.
    """
    if backend.role != "classifier":
        raise ConfigurationError(f"classify needs a classifier, got {backend.role}")
    declared = backend.class_count
    if declared is not None and declared != len(taxonomy):
        raise ConfigurationError(
            f"backend declares {declared} classes but taxonomy "
            f"{taxonomy.name!r} has {len(taxonomy)}"
        )
    raw = [float(s) for s in backend.score(pixels, key, len(taxonomy))]
    if len(raw) != len(taxonomy):
        raise ProtocolError(
            f"backend returned {len(raw)} scores for {len(taxonomy)}-class taxonomy"
        )
    total = sum(raw)
    if abs(total - 1.0) > 1e-3:
        raise ProtocolError(f"backend scores sum to {total}, beyond 1e-3 tolerance")
    if total != 1.0:
        raw = [s / total for s in raw]
    return ClassScores(taxonomy=taxonomy.name, scores=tuple(raw))


def encode_rle(bitmap: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating and starting with a background run."""
    flat = np.asarray(bitmap, dtype=bool).ravel(order="C")
    if flat.size == 0:
        return []
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate([[0], boundaries, [flat.size]])
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def decode_rle(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    """Inverse of encode_rle; validates the total length."""
    total = sum(counts)
    if total != height * width:
        raise ProtocolError(f"RLE covers {total} pixels, mask needs {height * width}")
    if any(c < 0 for c in counts):
        raise ProtocolError(f"negative run length in RLE: {counts}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(height, width)
