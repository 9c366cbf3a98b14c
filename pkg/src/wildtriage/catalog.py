"""Dataset ingestion: image manifests, VOC box annotations, and burst grouping.

The catalog is the immutable view of a camera-trap survey that every other
stage consumes. Boxes are normalized to [0,1] fractions at this boundary;
pixel formats only exist in external files.
"""

from __future__ import annotations

import csv
import io
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from .errors import (
    AnnotationError,
    CoordinateClampWarning,
    DataError,
    ManifestError,
    PartialBurstWarning,
)

MANIFEST_FIELDS = ("image_id", "camera_id", "captured_at", "file", "width", "height", "source")
SOURCES = ("captivity", "wild", "external")
LABEL_SETS = ("set1", "set2", "wild")

# Grayscale test for the infrared flag: channels equal within this tolerance
# for at least this fraction of sampled pixels.
IR_CHANNEL_TOLERANCE = 2
IR_PIXEL_FRACTION = 0.99


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Axis-aligned box as fractions of image dimensions, origin top-left."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x_min < self.x_max <= 1.0):
            raise DataError(f"invalid box x-range [{self.x_min}, {self.x_max}]")
        if not (0.0 <= self.y_min < self.y_max <= 1.0):
            raise DataError(f"invalid box y-range [{self.y_min}, {self.y_max}]")

    @classmethod
    def from_pixels(cls, xmin: float, ymin: float, xmax: float, ymax: float,
                    width: int, height: int) -> "BoundingBox":
        return cls(xmin / width, ymin / height, xmax / width, ymax / height)

    def to_pixels(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Denormalize to integer pixel coordinates (half-open intervals)."""
        return (
            round(self.x_min * width),
            round(self.y_min * height),
            round(self.x_max * width),
            round(self.y_max * height),
        )

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0.0 or h <= 0.0:
            return 0.0
        return w * h

    def overlaps(self, other: "BoundingBox") -> bool:
        return self.intersection_area(other) > 0.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class CameraTrapImage:
    image_id: str
    camera_id: str
    captured_at: Optional[datetime]
    file_ref: str
    width_px: int
    height_px: int
    source: str
    is_infrared: bool = False

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0:
            raise ManifestError(
                f"{self.image_id}: non-positive dimensions {self.width_px}x{self.height_px}"
            )
        if self.source not in SOURCES:
            raise ManifestError(f"{self.image_id}: unknown source {self.source!r}")
        if self.captured_at is None and self.source in ("captivity", "wild"):
            raise ManifestError(f"{self.image_id}: {self.source} images require a timestamp")


@dataclass(frozen=True)
class Burst:
    """One camera activation; the atomic unit for split assignment."""

    burst_id: str
    camera_id: str
    image_ids: tuple[str, ...]
    partial: bool = False

    def __post_init__(self) -> None:
        if not self.image_ids:
            raise DataError(f"burst {self.burst_id} has no images")

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass(frozen=True)
class Annotation:
    """Ground-truth boxes for one image, drawn from one labelling pass."""

    image_id: str
    boxes: tuple[tuple[BoundingBox, str], ...]
    label_set: str = "set1"

    def __post_init__(self) -> None:
        if self.label_set not in LABEL_SETS:
            raise AnnotationError(f"unknown label set {self.label_set!r}")

    def labels(self) -> tuple[str, ...]:
        return tuple(label for _, label in self.boxes)


@dataclass(frozen=True)
class BurstPolicy:
    """Gap-based grouping (default) or fixed images-per-activation by camera."""

    gap_seconds: float = 5.0
    fixed_counts: Optional[Mapping[str, int]] = None

    def count_for(self, camera_id: str) -> Optional[int]:
        if self.fixed_counts is None:
            return None
        return self.fixed_counts.get(camera_id)


@dataclass(frozen=True)
class Catalog:
    """Immutable, deterministically ordered set of images from one manifest."""

    images: tuple[CameraTrapImage, ...]
    root: Path = Path(".")
    _index: Mapping[str, CameraTrapImage] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: dict[str, CameraTrapImage] = {}
        for image in self.images:
            if image.image_id in index:
                raise ManifestError(f"duplicate image_id {image.image_id!r}")
            index[image.image_id] = image
        object.__setattr__(self, "_index", MappingProxyType(index))

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[CameraTrapImage]:
        return iter(self.images)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def get(self, image_id: str) -> CameraTrapImage:
        try:
            return self._index[image_id]
        except KeyError:
            raise ManifestError(f"unknown image_id {image_id!r}") from None

    @property
    def camera_ids(self) -> tuple[str, ...]:
        return tuple(sorted({img.camera_id for img in self.images}))

    def resolve_file(self, image: CameraTrapImage) -> str:
        """Resolve a file_ref against the manifest directory; URIs pass through."""
        if "://" in image.file_ref or Path(image.file_ref).is_absolute():
            return image.file_ref
        return str(self.root / image.file_ref)

    def to_manifest_text(self) -> str:
        """Canonical manifest serialization; byte-identical for equal catalogs."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS + ("infrared",))
        for img in self.images:
            captured = img.captured_at.isoformat(timespec="seconds") if img.captured_at else ""
            writer.writerow([
                img.image_id, img.camera_id, captured, img.file_ref,
                img.width_px, img.height_px, img.source,
                "1" if img.is_infrared else "0",
            ])
        return out.getvalue()


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes"):
        return True
    if value in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_timestamp(raw: str) -> Optional[datetime]:
    if not raw.strip():
        return None
    stamp = datetime.fromisoformat(raw.strip())
    return stamp.replace(microsecond=0)


def ingest_manifest(manifest_path: str | Path, *, no_pixels: bool = False) -> Catalog:
    """Read a line-delimited manifest into an immutable catalog.

    Records are ordered by (camera_id, captured_at, image_id). Unless
    ``no_pixels`` is set, referenced files must exist and images without an
    explicit infrared flag get it derived from a pixel grayscale test.
    """
    path = Path(manifest_path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent

    records: list[CameraTrapImage] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header: Optional[list[str]] = None
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if header is None:
                header = [cell.strip() for cell in row]
                expected = list(MANIFEST_FIELDS)
                if header != expected and header != expected + ["infrared"]:
                    raise ManifestError(
                        f"line {reader.line_num}: manifest header must be "
                        f"{','.join(expected)}[,infrared], got {','.join(header)}"
                    )
                continue
            if len(row) != len(header):
                raise ManifestError(
                    f"line {reader.line_num}: expected {len(header)} fields, got {len(row)}"
                )
            rec = dict(zip(header, (cell.strip() for cell in row)))
            if rec["image_id"] in seen:
                raise ManifestError(
                    f"line {reader.line_num}: duplicate image_id {rec['image_id']!r}"
                )
            seen.add(rec["image_id"])
            try:
                captured = _parse_timestamp(rec["captured_at"])
                width = int(rec["width"])
                height = int(rec["height"])
                infrared_raw = rec.get("infrared", "")
                infrared = _parse_bool(infrared_raw) if infrared_raw else None
            except (ValueError, ManifestError) as exc:
                raise ManifestError(f"line {reader.line_num}: {exc}") from exc

            file_ref = rec["file"]
            is_uri = "://" in file_ref
            if not no_pixels and not is_uri:
                resolved = Path(file_ref) if Path(file_ref).is_absolute() else root / file_ref
                if not resolved.exists():
                    raise ManifestError(
                        f"line {reader.line_num}: image file missing: {resolved}"
                    )

            if infrared is None:
                infrared = False if no_pixels else _derive_infrared(file_ref, root, width, height)

            try:
                records.append(CameraTrapImage(
                    image_id=rec["image_id"],
                    camera_id=rec["camera_id"],
                    captured_at=captured,
                    file_ref=file_ref,
                    width_px=width,
                    height_px=height,
                    source=rec["source"],
                    is_infrared=infrared,
                ))
            except ManifestError as exc:
                raise ManifestError(f"line {reader.line_num}: {exc}") from exc

    records.sort(key=lambda im: (im.camera_id, im.captured_at or datetime.min, im.image_id))
    return Catalog(images=tuple(records), root=root)


def _derive_infrared(file_ref: str, root: Path, width: int, height: int) -> bool:
    from . import imaging  # avoid a module cycle at import time

    pixels = imaging.load_pixels_ref(file_ref, root, width, height)
    return infer_infrared(pixels)


def infer_infrared(pixels) -> bool:
    """Grayscale test: R=G=B within tolerance for >=99% of sampled pixels."""
    import numpy as np

    flat = pixels.reshape(-1, pixels.shape[-1])
    stride = max(1, flat.shape[0] // 4096)
    sample = flat[::stride].astype(np.int16)
    spread = sample.max(axis=1) - sample.min(axis=1)
    return bool(np.mean(spread <= IR_CHANNEL_TOLERANCE) >= IR_PIXEL_FRACTION)


def parse_box_annotations(
    xml_path: str | Path | ET.Element,
    image: CameraTrapImage,
    *,
    label_set: str = "set1",
) -> Annotation:
    """Parse a VOC-style XML file into normalized boxes for ``image``.

    Pixel coordinates outside the image are clamped and reported via a
    CoordinateClampWarning; boxes degenerate after clamping are an error.
    """
    if isinstance(xml_path, ET.Element):
        node = xml_path
        origin = node.findtext("filename", default="<element>")
    else:
        try:
            node = ET.parse(xml_path).getroot()
        except ET.ParseError as exc:
            raise AnnotationError(f"{xml_path}: malformed XML: {exc}") from exc
        origin = str(xml_path)
    if node.tag != "annotation":
        raise AnnotationError(f"{origin}: root element must be <annotation>, got <{node.tag}>")

    size = node.find("size")
    if size is not None:
        declared_w = int(size.findtext("width", default="0"))
        declared_h = int(size.findtext("height", default="0"))
        if (declared_w, declared_h) != (image.width_px, image.height_px):
            raise AnnotationError(
                f"{origin}: size {declared_w}x{declared_h} does not match image "
                f"{image.image_id} ({image.width_px}x{image.height_px})"
            )

    boxes: list[tuple[BoundingBox, str]] = []
    for obj in node.findall("object"):
        name = obj.findtext("name")
        if name is None:
            raise AnnotationError(f"{origin}: object missing <name>")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise AnnotationError(f"{origin}: object {name!r} missing <bndbox>")
        try:
            coords = {k: float(bnd.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")}
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"{origin}: object {name!r} has incomplete bndbox") from exc

        xmin = min(max(coords["xmin"], 0.0), image.width_px)
        ymin = min(max(coords["ymin"], 0.0), image.height_px)
        xmax = min(max(coords["xmax"], 0.0), image.width_px)
        ymax = min(max(coords["ymax"], 0.0), image.height_px)
        if (xmin, ymin, xmax, ymax) != (coords["xmin"], coords["ymin"], coords["xmax"], coords["ymax"]):
            warnings.warn(
                f"{origin}: box {tuple(coords.values())} clamped to image bounds",
                CoordinateClampWarning,
                stacklevel=2,
            )
        if xmin >= xmax or ymin >= ymax:
            raise AnnotationError(f"{origin}: degenerate box for object {name!r} after clamping")
        boxes.append((
            BoundingBox.from_pixels(xmin, ymin, xmax, ymax, image.width_px, image.height_px),
            name,
        ))

    return Annotation(image_id=image.image_id, boxes=tuple(boxes), label_set=label_set)


def annotation_to_xml(annotation: Annotation, image: CameraTrapImage) -> str:
    """Serialize one annotation back to ingester-compatible VOC XML."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = image.image_id
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(image.width_px)
    ET.SubElement(size, "height").text = str(image.height_px)
    ET.SubElement(size, "depth").text = "3"
    for box, label in annotation.boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = label
        bnd = ET.SubElement(obj, "bndbox")
        xmin, ymin, xmax, ymax = box.to_pixels(image.width_px, image.height_px)
        for tag, value in (("xmin", xmin), ("ymin", ymin), ("xmax", xmax), ("ymax", ymax)):
            ET.SubElement(bnd, tag).text = str(value)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def iter_annotation_elements(xml_path: str | Path) -> Iterator[ET.Element]:
    """Yield <annotation> elements from a single- or multi-annotation document."""
    root = ET.parse(xml_path).getroot()
    if root.tag == "annotation":
        yield root
    else:
        yield from root.iter("annotation")


def load_annotations(
    directory: str | Path,
    catalog: Catalog,
    *,
    label_set: str = "set1",
) -> dict[str, Annotation]:
    """Load per-image VOC files named ``<image_id>.xml`` for catalog members."""
    directory = Path(directory)
    annotations: dict[str, Annotation] = {}
    for xml_file in sorted(directory.glob("*.xml")):
        image_id = xml_file.stem
        if image_id not in catalog:
            continue
        annotations[image_id] = parse_box_annotations(
            xml_file, catalog.get(image_id), label_set=label_set
        )
    return annotations


def group_bursts(images: Sequence[CameraTrapImage], policy: BurstPolicy) -> list[Burst]:
    """Partition images into activation bursts, per camera.

    Gap-based grouping starts a new burst whenever the inter-image gap
    exceeds ``policy.gap_seconds``; cameras with a fixed activation count
    are chunked instead, flagging any trailing partial burst.
    """
    by_camera: dict[str, list[CameraTrapImage]] = {}
    for image in images:
        if image.captured_at is None:
            raise DataError(f"{image.image_id}: burst grouping requires timestamps")
        by_camera.setdefault(image.camera_id, []).append(image)

    bursts: list[Burst] = []
    for camera_id in sorted(by_camera):
        members = sorted(by_camera[camera_id], key=lambda im: (im.captured_at, im.image_id))
        fixed = policy.count_for(camera_id)
        if fixed is not None:
            groups = [members[i:i + fixed] for i in range(0, len(members), fixed)]
            partials = [len(g) != fixed for g in groups]
            if groups and partials[-1]:
                warnings.warn(
                    f"camera {camera_id}: trailing burst has {len(groups[-1])} of {fixed} images",
                    PartialBurstWarning,
                    stacklevel=2,
                )
        else:
            groups = []
            partials = []
            for image in members:
                previous = groups[-1][-1] if groups and groups[-1] else None
                if (
                    previous is None
                    or (image.captured_at - previous.captured_at).total_seconds()
                    > policy.gap_seconds
                ):
                    groups.append([image])
                else:
                    groups[-1].append(image)
            partials = [False] * len(groups)
        for index, group in enumerate(groups):
            bursts.append(Burst(
                burst_id=f"{camera_id}-b{index:04d}",
                camera_id=camera_id,
                image_ids=tuple(im.image_id for im in group),
                partial=bool(partials[index]) if partials else False,
            ))
    return bursts


def bursts_to_text(bursts: Iterable[Burst]) -> str:
    """Canonical burst serialization: ``burst_id,camera_id,image_ids...``."""
    lines = []
    for burst in bursts:
        flag = "partial" if burst.partial else "full"
        lines.append(",".join([burst.burst_id, burst.camera_id, flag, *burst.image_ids]))
    return "\n".join(lines) + ("\n" if lines else "")
