"""Backend implementations: fixtures, heuristic stubs, external processes.

Fixtures replay stored outputs keyed by image id (``image:box`` keys first,
bare image id as fallback). Heuristic stubs compute cheap deterministic
answers from pixels so large synthetic batches never need stored data.
External processes speak a newline-delimited JSON protocol over stdin/stdout.
"""

from __future__ import annotations

import base64
import json
import queue
import subprocess
import threading
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .catalog import BoundingBox, CameraTrapImage
from .errors import ConfigurationError, ProtocolError, StageError
from .stages import (
    DEFAULT_RESOLUTION,
    BackendDescriptor,
    Mask,
    RegionProposal,
    decode_rle,
    encode_rle,
)

DEFAULT_BATCH_TIMEOUT = 120.0


class Backend:
    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self.role = descriptor.role
        self.config = dict(descriptor.config)

    @property
    def version(self) -> str:
        return self.descriptor.version()


def _load_table(config: Mapping, inline_key: str, file_key: str) -> dict:
    if inline_key in config:
        return dict(config[inline_key])
    if file_key in config:
        return json.loads(Path(config[file_key]).read_text(encoding="utf-8"))
    return {}


def _gray(pixels: np.ndarray) -> np.ndarray:
    return pixels.mean(axis=2, dtype=np.float32)


# ---------------------------------------------------------------------------
# Detectors


class FixtureDetector(Backend):
    def __init__(self, descriptor: BackendDescriptor):
        super().__init__(descriptor)
        table = _load_table(self.config, "proposals", "proposals_file")
        self._proposals: dict[str, list[RegionProposal]] = {}
        for image_id, entries in table.items():
            self._proposals[image_id] = [
                RegionProposal(
                    box=BoundingBox(*entry["box"]),
                    confidence=float(entry["confidence"]),
                    detector_class=str(entry.get("class", "")),
                )
                for entry in entries
            ]

    def propose(self, image: CameraTrapImage, pixels) -> list[RegionProposal]:
        return list(self._proposals.get(image.image_id, []))


class StubDetector(Backend):
    """Flags the darkest region of a subsampled grayscale image as one proposal."""

    def __init__(self, descriptor: BackendDescriptor):
        super().__init__(descriptor)
        self.stride = int(self.config.get("stride", 8))
        self.dark_offset = float(self.config.get("dark_offset", 24.0))
        self.min_area_frac = float(self.config.get("min_area_frac", 0.001))

    def propose(self, image: CameraTrapImage, pixels) -> list[RegionProposal]:
        if pixels is None:
            raise StageError("heuristic detector needs pixels")
        height, width = pixels.shape[:2]
        stride = max(1, min(self.stride, min(height, width) // 8 or 1))
        cells = _gray(pixels[::stride, ::stride])
        dark = cells < (np.median(cells) - self.dark_offset)
        frac = float(dark.mean())
        if frac < self.min_area_frac:
            return []
        ys, xs = np.nonzero(dark)
        x0 = int(xs.min()) * stride
        y0 = int(ys.min()) * stride
        x1 = min(width, (int(xs.max()) + 1) * stride)
        y1 = min(height, (int(ys.max()) + 1) * stride)
        box = BoundingBox.from_pixels(x0, y0, x1, y1, width, height)
        confidence = round(min(1.0, 0.5 + 4.0 * frac), 6)
        return [RegionProposal(box=box, confidence=confidence, detector_class="animal")]


# ---------------------------------------------------------------------------
# Segmenters


class FixtureSegmenter(Backend):
    def __init__(self, descriptor: BackendDescriptor):
        super().__init__(descriptor)
        self._masks = _load_table(self.config, "masks", "masks_file")

    def segment(self, crop: np.ndarray, key: Optional[str]) -> Mask:
        height, width = crop.shape[:2]
        entry = self._masks.get(key or "")
        if entry is None:
            return Mask.full(width, height)
        mask_h, mask_w = entry["size"]
        if (mask_h, mask_w) != (height, width):
            raise StageError(
                f"fixture mask for {key!r} is {mask_w}x{mask_h}, crop is {width}x{height}"
            )
        return Mask(width=width, height=height,
                    bitmap=decode_rle(entry["counts"], mask_h, mask_w))


class StubSegmenter(Backend):
    """Marks pixels darker than the crop mean as foreground."""

    def __init__(self, descriptor: BackendDescriptor):
        super().__init__(descriptor)
        self.offset = float(self.config.get("offset", 8.0))

    def segment(self, crop: np.ndarray, key: Optional[str]) -> Mask:
        gray = _gray(crop)
        bitmap = gray < (gray.mean() - self.offset)
        return Mask(width=crop.shape[1], height=crop.shape[0], bitmap=bitmap)


# ---------------------------------------------------------------------------
# Classifiers


class FixtureClassifier(Backend):
    def __init__(self, descriptor: BackendDescriptor):
        super().__init__(descriptor)
        table = _load_table(self.config, "scores", "scores_file")
        # score files may wrap the mapping to carry a declared class count
        if "scores" in table and isinstance(table["scores"], dict):
            self._scores = table["scores"]
            declared = table.get("classes")
        else:
            self._scores = table
            declared = self.config.get("classes")
        if declared is None and self._scores:
            declared = len(next(iter(self._scores.values())))
        self.class_count = int(declared) if declared is not None else None
        self.model_id = str(self.config.get("model_id", "fixture"))
        self.resolution = int(self.config.get("resolution", DEFAULT_RESOLUTION))

    def score(self, pixels, key: Optional[str], n_classes: int) -> Sequence[float]:
        if key is not None:
            if key in self._scores:
                return self._scores[key]
            image_id = key.split(":", 1)[0]
            if image_id in self._scores:
                return self._scores[image_id]
        raise StageError(f"fixture classifier {self.model_id!r} has no scores for {key!r}")


class StubClassifier(Backend):
    """Mean-intensity rule: darker-than-threshold input wins the first class."""

    def __init__(self, descriptor: BackendDescriptor):
        super().__init__(descriptor)
        self.threshold = float(self.config.get("threshold", 128.0))
        self.confidence = float(self.config.get("confidence", 0.7))
        self.model_id = str(self.config.get("model_id", "stub"))
        self.resolution = int(self.config.get("resolution", DEFAULT_RESOLUTION))
        self.class_count: Optional[int] = None  # adapts to the taxonomy

    def score(self, pixels, key: Optional[str], n_classes: int) -> list[float]:
        winner = 0 if float(pixels.mean()) < self.threshold else n_classes - 1
        if n_classes == 1:
            return [1.0]
        rest = (1.0 - self.confidence) / (n_classes - 1)
        scores = [rest] * n_classes
        scores[winner] = self.confidence
        return scores


# ---------------------------------------------------------------------------
# External process protocol


class ExternalProcessRunner:
    """One batch per spawned process; newline-delimited JSON both ways."""

    def __init__(self, command: Sequence[str], timeout: float = DEFAULT_BATCH_TIMEOUT):
        if not command:
            raise ConfigurationError("external backend command is empty")
        self.command = list(command)
        self.timeout = timeout

    def run_batch(self, requests: Sequence[Mapping[str, Any]]) -> list[dict]:
        import time

        deadline = time.monotonic() + self.timeout
        try:
            proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
            )
        except OSError as exc:
            raise StageError(f"cannot start backend {self.command}: {exc}") from exc

        lines: "queue.Queue[Optional[str]]" = queue.Queue()

        def _pump() -> None:
            assert proc.stdout is not None
            for line in proc.stdout:
                lines.put(line)
            lines.put(None)

        reader = threading.Thread(target=_pump, daemon=True)
        reader.start()

        responses: list[dict] = []
        try:
            for index, request in enumerate(requests):
                payload = dict(request)
                payload["id"] = index
                proc.stdin.write(json.dumps(payload, sort_keys=True) + "\n")
                proc.stdin.flush()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise StageError(f"backend {self.command[0]} timed out after {self.timeout}s")
                try:
                    line = lines.get(timeout=remaining)
                except queue.Empty:
                    raise StageError(
                        f"backend {self.command[0]} timed out after {self.timeout}s"
                    ) from None
                if line is None:
                    raise StageError(
                        f"backend {self.command[0]} closed its output after "
                        f"{len(responses)} of {len(requests)} responses"
                    )
                try:
                    response = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ProtocolError(f"malformed response line: {line.rstrip()}") from exc
                if response.get("id") != index:
                    raise ProtocolError(
                        f"response id {response.get('id')} does not match request {index}"
                    )
                responses.append(response)
            proc.stdin.close()
            try:
                returncode = proc.wait(timeout=max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                raise StageError(
                    f"backend {self.command[0]} did not exit within the batch timeout"
                ) from None
            if returncode != 0:
                stderr = proc.stderr.read() if proc.stderr else ""
                raise StageError(
                    f"backend {self.command[0]} exited with status {returncode}: "
                    f"{stderr.strip()[:500]}"
                )
            return responses
        except BaseException:
            proc.kill()
            proc.wait()
            raise
        finally:
            for stream in (proc.stdin, proc.stdout, proc.stderr):
                if stream and not stream.closed:
                    stream.close()


def run_external_backend(
    descriptor: BackendDescriptor,
    requests: Sequence[Mapping[str, Any]],
) -> list[dict]:
    """Send a batch through an external_process backend, order-preserving."""
    if descriptor.kind != "external_process":
        raise ConfigurationError(f"not an external_process backend: {descriptor.kind}")
    runner = ExternalProcessRunner(
        descriptor.config["command"],
        timeout=float(descriptor.config.get("timeout", DEFAULT_BATCH_TIMEOUT)),
    )
    return runner.run_batch([dict(r, role=descriptor.role) for r in requests])


def _pixels_payload(pixels: np.ndarray) -> dict:
    return {
        "pixels_b64": base64.b64encode(np.ascontiguousarray(pixels).tobytes()).decode("ascii"),
        "width": int(pixels.shape[1]),
        "height": int(pixels.shape[0]),
        "channels": int(pixels.shape[2]),
    }


class ExternalDetector(Backend):
    def __init__(self, descriptor: BackendDescriptor):
        super().__init__(descriptor)

    def propose(self, image: CameraTrapImage, pixels) -> list[RegionProposal]:
        request = {"input": {"path": image.file_ref}, "params": {}}
        if pixels is not None:
            request["input"] = _pixels_payload(pixels)
        (response,) = run_external_backend(self.descriptor, [request])
        if "proposals" not in response:
            raise ProtocolError(f"detector response missing 'proposals': {response}")
        return [
            RegionProposal(
                box=BoundingBox(*entry["box"]),
                confidence=float(entry["confidence"]),
                detector_class=str(entry.get("class", "")),
            )
            for entry in response["proposals"]
        ]


class ExternalSegmenter(Backend):
    def segment(self, crop: np.ndarray, key: Optional[str]) -> Mask:
        request = {"input": _pixels_payload(crop), "params": {"key": key}}
        (response,) = run_external_backend(self.descriptor, [request])
        if "mask_rle" not in response:
            raise ProtocolError(f"segmenter response missing 'mask_rle': {response}")
        entry = response["mask_rle"]
        height, width = crop.shape[:2]
        return Mask(width=width, height=height,
                    bitmap=decode_rle(entry["counts"], height, width))


class ExternalClassifier(Backend):
    def __init__(self, descriptor: BackendDescriptor):
        super().__init__(descriptor)
        declared = self.config.get("classes")
        self.class_count = int(declared) if declared is not None else None
        self.model_id = str(self.config.get("model_id", "external"))
        self.resolution = int(self.config.get("resolution", DEFAULT_RESOLUTION))

    def score(self, pixels, key: Optional[str], n_classes: int) -> Sequence[float]:
        request = {"input": _pixels_payload(pixels), "params": {"key": key, "classes": n_classes}}
        (response,) = run_external_backend(self.descriptor, [request])
        if "scores" not in response:
            raise ProtocolError(f"classifier response missing 'scores': {response}")
        return response["scores"]


_BUILDERS = {
    ("fixture", "detector"): FixtureDetector,
    ("fixture", "segmenter"): FixtureSegmenter,
    ("fixture", "classifier"): FixtureClassifier,
    ("heuristic_stub", "detector"): StubDetector,
    ("heuristic_stub", "segmenter"): StubSegmenter,
    ("heuristic_stub", "classifier"): StubClassifier,
    ("external_process", "detector"): ExternalDetector,
    ("external_process", "segmenter"): ExternalSegmenter,
    ("external_process", "classifier"): ExternalClassifier,
}


def build_backend(descriptor: BackendDescriptor) -> Backend:
    return _BUILDERS[(descriptor.kind, descriptor.role)](descriptor)


def mask_to_rle_payload(mask: Mask) -> dict:
    return {"size": [mask.height, mask.width], "counts": encode_rle(mask.bitmap)}
