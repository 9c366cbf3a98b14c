"""Pixel access: file and synthetic image sources, PNG encoding.

``synthetic://scene/<key>`` refs render a deterministic test scene from the
key alone, so large benchmark catalogs never touch the filesystem. The scene
layout (gradient background, zero or more darker rectangles) is exposed so
fixture generators can derive ground truth from the same bytes.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import BoundingBox, CameraTrapImage, Catalog
from .errors import DataError

SYNTHETIC_PREFIX = "synthetic://scene/"

# Channel offsets that make colour scenes fail the grayscale infrared test.
_COLOR_OFFSETS = (6, 0, -6)


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic layout of one synthetic scene."""

    width: int
    height: int
    base_level: int
    infrared: bool
    rects: tuple[tuple[int, int, int, int, int], ...]  # x0, y0, x1, y1, gray level

    def rect_boxes(self) -> tuple[BoundingBox, ...]:
        return tuple(
            BoundingBox.from_pixels(x0, y0, x1, y1, self.width, self.height)
            for x0, y0, x1, y1, _ in self.rects
        )


def scene_spec(width: int, height: int, key: str) -> SceneSpec:
    """Derive a scene layout from a key; stable across runs and platforms."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    base = 112 + digest[0] % 96
    infrared = digest[1] % 3 == 0
    rects: list[tuple[int, int, int, int, int]] = []
    if digest[2] % 4 != 0:  # ~75% of scenes contain a subject
        rw = max(2, int(width * (0.12 + 0.25 * digest[3] / 255)))
        rh = max(2, int(height * (0.12 + 0.25 * digest[4] / 255)))
        x0 = int((width - rw) * digest[5] / 255)
        y0 = int((height - rh) * digest[6] / 255)
        level = max(8, base - 48 - digest[7] % 48)
        rects.append((x0, y0, x0 + rw, y0 + rh, level))
        if digest[8] % 8 == 0:  # occasional second, smaller subject
            sw, sh = max(2, rw // 2), max(2, rh // 2)
            sx = int((width - sw) * digest[9] / 255)
            sy = int((height - sh) * digest[10] / 255)
            rects.append((sx, sy, sx + sw, sy + sh, max(8, level - 16)))
    return SceneSpec(width=width, height=height, base_level=base,
                     infrared=infrared, rects=tuple(rects))


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Render a SceneSpec to an HxWx3 uint8 array.

    Stays in uint8 throughout: base levels sit in [112, 207] and the
    gradient adds at most 20, so no channel can leave [100, 233].
    """
    rows = np.linspace(0.0, 10.0, spec.height, dtype=np.float32)[:, None]
    cols = np.linspace(0.0, 10.0, spec.width, dtype=np.float32)[None, :]
    gray = (spec.base_level + rows + cols).astype(np.uint8)
    image = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
    if spec.infrared:
        image[:] = gray[:, :, None]
    else:
        for channel, offset in enumerate(_COLOR_OFFSETS):
            image[:, :, channel] = gray + np.uint8(offset) if offset >= 0 \
                else gray - np.uint8(-offset)
    for x0, y0, x1, y1, level in spec.rects:
        image[y0:y1, x0:x1] = level
    return image


def synthetic_ref(key: str) -> str:
    return SYNTHETIC_PREFIX + key


def is_synthetic(file_ref: str) -> bool:
    return file_ref.startswith(SYNTHETIC_PREFIX)


def load_pixels_ref(file_ref: str, root: Path, width: int, height: int) -> np.ndarray:
    """Load pixels for a file_ref; synthetic refs render, paths decode."""
    if is_synthetic(file_ref):
        key = file_ref[len(SYNTHETIC_PREFIX):]
        return render_scene(scene_spec(width, height, key))
    if "://" in file_ref:
        raise DataError(f"unsupported pixel source: {file_ref}")
    path = Path(file_ref) if Path(file_ref).is_absolute() else root / file_ref
    from PIL import Image

    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"))
    if pixels.shape[:2] != (height, width):
        raise DataError(
            f"{path}: decoded size {pixels.shape[1]}x{pixels.shape[0]} does not "
            f"match manifest {width}x{height}"
        )
    return pixels


def load_pixels(image: CameraTrapImage, catalog: Catalog) -> np.ndarray:
    return load_pixels_ref(image.file_ref, catalog.root, image.width_px, image.height_px)


def encode_png(pixels: np.ndarray) -> bytes:
    from PIL import Image

    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    return buffer.getvalue()


def save_png(pixels: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(pixels))
