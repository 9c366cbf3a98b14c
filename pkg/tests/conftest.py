from __future__ import annotations

from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pytest

from wildtriage.catalog import Burst, CameraTrapImage


def make_image(
    image_id: str = "img-0001",
    camera_id: str = "1",
    captured_at: str | datetime | None = "2021-06-01T00:00:00",
    width: int = 100,
    height: int = 100,
    file_ref: str = "synthetic://scene/test",
    source: str = "captivity",
    infrared: bool = False,
) -> CameraTrapImage:
    if isinstance(captured_at, str):
        captured_at = datetime.fromisoformat(captured_at)
    return CameraTrapImage(
        image_id=image_id,
        camera_id=camera_id,
        captured_at=captured_at,
        file_ref=file_ref,
        width_px=width,
        height_px=height,
        source=source,
        is_infrared=infrared,
    )


def make_images(
    n: int,
    camera_id: str = "1",
    start: str = "2021-06-01T00:00:00",
    gap_seconds: float = 2.0,
    prefix: str = "img",
) -> list[CameraTrapImage]:
    base = datetime.fromisoformat(start)
    return [
        make_image(
            image_id=f"{prefix}-{i:04d}",
            camera_id=camera_id,
            captured_at=base + timedelta(seconds=gap_seconds * i),
        )
        for i in range(n)
    ]


def make_burst(burst_id: str, camera_id: str, n_images: int) -> Burst:
    return Burst(
        burst_id=burst_id,
        camera_id=camera_id,
        image_ids=tuple(f"{burst_id}-i{k}" for k in range(n_images)),
    )


def write_manifest(path: Path, rows: list[dict], include_infrared: bool = True) -> Path:
    header = "image_id,camera_id,captured_at,file,width,height,source"
    if include_infrared:
        header += ",infrared"
    lines = [header]
    for row in rows:
        line = (
            f"{row['image_id']},{row['camera_id']},{row.get('captured_at', '')},"
            f"{row['file']},{row.get('width', 100)},{row.get('height', 100)},"
            f"{row.get('source', 'captivity')}"
        )
        if include_infrared:
            line += f",{row.get('infrared', '0')}"
        lines.append(line)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def gray_pixels(width: int, height: int, value: int = 128) -> np.ndarray:
    return np.full((height, width, 3), value, dtype=np.uint8)


@pytest.fixture(scope="session")
def fixture_tree(tmp_path_factory):
    """One shared 200-image synthetic fixture for experiment-level tests."""
    from wildtriage.fixtures import build_fixture

    root = tmp_path_factory.mktemp("fixture200")
    return build_fixture(root, n_images=200, seed=7)
