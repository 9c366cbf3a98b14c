from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wildtriage.backends import build_backend
from wildtriage.catalog import BoundingBox
from wildtriage.curation import FOUR_CLASS, TWO_CLASS
from wildtriage.errors import ConfigurationError, DataError, ProtocolError, StageError
from wildtriage.stages import (
    BackendDescriptor,
    ClassScores,
    Mask,
    RegionProposal,
    classify,
    composite_mask,
    decode_rle,
    detect_regions,
    encode_rle,
    letterbox,
)

from .conftest import gray_pixels, make_image


def fixture_detector(proposals_by_image):
    return build_backend(BackendDescriptor(
        kind="fixture", role="detector", config={"proposals": proposals_by_image}))


def _proposal_entries(*confidences, detector_class="animal"):
    return [
        {"box": [0.1 * (i + 1), 0.1, 0.1 * (i + 1) + 0.2, 0.4],
         "confidence": c, "class": detector_class}
        for i, c in enumerate(confidences)
    ]


class TestDetectRegions:
    def test_threshold_one_keeps_nothing_below_exact_one(self):
        backend = fixture_detector({"img-0001": _proposal_entries(0.9, 0.2)})
        assert detect_regions(backend, make_image(), 1.0) == []

    def test_threshold_filters_low_confidence(self):
        backend = fixture_detector({"img-0001": _proposal_entries(0.9, 0.2)})
        kept = detect_regions(backend, make_image(), 0.5)
        assert [p.confidence for p in kept] == [0.9]

    def test_detector_classes_forwarded_untouched(self):
        entries = _proposal_entries(0.8, detector_class="dog")
        entries += _proposal_entries(0.7, detector_class="vehicle")
        backend = fixture_detector({"img-0001": entries})
        kept = detect_regions(backend, make_image(), 0.5)
        assert [p.detector_class for p in kept] == ["dog", "vehicle"]

    def test_sorted_by_confidence_then_box(self):
        entries = [
            {"box": [0.5, 0.5, 0.6, 0.6], "confidence": 0.7},
            {"box": [0.1, 0.1, 0.2, 0.2], "confidence": 0.7},
            {"box": [0.3, 0.3, 0.4, 0.4], "confidence": 0.9},
        ]
        backend = fixture_detector({"img-0001": entries})
        kept = detect_regions(backend, make_image(), 0.0)
        assert [(p.confidence, p.box.x_min) for p in kept] == [
            (0.9, 0.3), (0.7, 0.1), (0.7, 0.5)]

    def test_wrong_role_rejected(self):
        backend = build_backend(BackendDescriptor(
            kind="heuristic_stub", role="segmenter", config={}))
        with pytest.raises(ConfigurationError, match="detector"):
            detect_regions(backend, make_image(), 0.5)


class TestCompositeMask:
    def test_all_true_is_identity(self):
        crop = np.random.default_rng(0).integers(0, 255, (8, 10, 3), dtype=np.uint8)
        out = composite_mask(crop, Mask.full(10, 8, True), (1, 2, 3))
        assert np.array_equal(out, crop)

    def test_all_false_is_constant_fill(self):
        crop = np.random.default_rng(0).integers(0, 255, (8, 10, 3), dtype=np.uint8)
        out = composite_mask(crop, Mask.full(10, 8, False), (9, 8, 7))
        assert (out == np.array([9, 8, 7], dtype=np.uint8)).all()

    def test_pixel_sum_identity_on_half_mask(self):
        rng = np.random.default_rng(1)
        crop = rng.integers(0, 255, (6, 6, 3), dtype=np.uint8)
        bitmap = np.zeros((6, 6), dtype=bool)
        bitmap[:3] = True
        out = composite_mask(crop, Mask(width=6, height=6, bitmap=bitmap), (10, 10, 10))
        expected = int(crop[:3].sum()) + 10 * 3 * bitmap.size // 2
        assert int(out.sum()) == expected

    def test_dimension_mismatch_is_error(self):
        crop = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(StageError, match="does not match"):
            composite_mask(crop, Mask.full(5, 4), (0, 0, 0))

    @settings(max_examples=25, deadline=None)
    @given(bitmap=arrays(np.bool_, (5, 7)))
    def test_compositing_idempotence(self, bitmap):
        crop = np.arange(5 * 7 * 3, dtype=np.uint8).reshape(5, 7, 3)
        mask = Mask(width=7, height=5, bitmap=bitmap)
        once = composite_mask(crop, mask, (128, 128, 128))
        twice = composite_mask(once, mask, (128, 128, 128))
        assert np.array_equal(once, twice)


def fixture_classifier(scores, model_id="m", classes=None):
    config = {"scores": scores, "model_id": model_id}
    if classes is not None:
        config["classes"] = classes
    return build_backend(BackendDescriptor(
        kind="fixture", role="classifier", config=config))


class TestClassify:
    def test_fixture_returns_stored_vector_summing_to_one(self):
        backend = fixture_classifier({"img-0001": [0.5, 0.25, 0.125, 0.125]})
        scores = classify(backend, gray_pixels(4, 4), FOUR_CLASS, key="img-0001:0")
        assert scores.scores == (0.5, 0.25, 0.125, 0.125)
        assert abs(sum(scores.scores) - 1.0) <= 1e-6

    def test_declared_class_count_mismatch_is_configuration_error(self):
        backend = fixture_classifier({"x": [0.25] * 4}, classes=4)
        with pytest.raises(ConfigurationError, match="4 classes"):
            classify(backend, gray_pixels(4, 4), TWO_CLASS, key="x")

    def test_small_drift_renormalized_silently(self):
        backend = fixture_classifier({"x": [0.7005, 0.1, 0.1, 0.1]})
        scores = classify(backend, gray_pixels(4, 4), FOUR_CLASS, key="x")
        assert abs(sum(scores.scores) - 1.0) <= 1e-6

    def test_large_drift_is_protocol_error(self):
        backend = fixture_classifier({"x": [0.9, 0.2, 0.1, 0.1]})
        with pytest.raises(ProtocolError, match="sum"):
            classify(backend, gray_pixels(4, 4), FOUR_CLASS, key="x")

    def test_missing_fixture_key_is_stage_error(self):
        backend = fixture_classifier({"x": [0.25] * 4})
        with pytest.raises(StageError, match="no scores"):
            classify(backend, gray_pixels(4, 4), FOUR_CLASS, key="y:0")

    def test_stub_matches_independent_mean_intensity_rule(self):
        backend = build_backend(BackendDescriptor(
            kind="heuristic_stub", role="classifier",
            config={"threshold": 128.0, "confidence": 0.7}))
        dark = gray_pixels(16, 16, 40)
        bright = gray_pixels(16, 16, 220)
        for crop in (dark, bright):
            scores = classify(backend, crop, FOUR_CLASS, key=None)
            # independent implementation of the same rule
            expected_winner = 0 if crop.mean() < 128.0 else len(FOUR_CLASS) - 1
            assert scores.scores.index(max(scores.scores)) == expected_winner

    def test_score_vector_length_must_match(self):
        backend = fixture_classifier({"x": [0.5, 0.5]})
        backend.class_count = None  # force the runtime length check
        with pytest.raises(ProtocolError, match="2 scores"):
            classify(backend, gray_pixels(4, 4), FOUR_CLASS, key="x")


class TestClassScores:
    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            ClassScores(taxonomy="t", scores=(1.2, -0.2))

    def test_rejects_bad_sum(self):
        with pytest.raises(DataError):
            ClassScores(taxonomy="t", scores=(0.5, 0.2))


class TestLetterbox:
    def test_output_square_with_fill_border(self):
        pixels = gray_pixels(50, 100, 60)  # taller than wide
        out = letterbox(pixels, 64, (1, 2, 3))
        assert out.shape == (64, 64, 3)
        assert (out[:, 0] == np.array([1, 2, 3], dtype=np.uint8)).all()
        assert (out[32] == 60).any()

    def test_identity_scale_content_preserved(self):
        pixels = np.arange(32 * 32 * 3, dtype=np.uint8).reshape(32, 32, 3)
        out = letterbox(pixels, 32, (0, 0, 0))
        assert np.array_equal(out, pixels)


class TestRle:
    def test_known_pattern(self):
        bitmap = np.array([[False, True, True], [False, False, True]])
        counts = encode_rle(bitmap)
        assert counts == [1, 2, 2, 1]
        assert np.array_equal(decode_rle(counts, 2, 3), bitmap)

    def test_leading_foreground_gets_zero_prefix(self):
        bitmap = np.array([[True, False]])
        assert encode_rle(bitmap) == [0, 1, 1]

    @settings(max_examples=50, deadline=None)
    @given(bitmap=arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
    def test_round_trip_property(self, bitmap):
        counts = encode_rle(bitmap)
        assert np.array_equal(decode_rle(counts, *bitmap.shape), bitmap)

    def test_length_mismatch_is_protocol_error(self):
        with pytest.raises(ProtocolError):
            decode_rle([1, 2], 2, 3)


class TestBackendDescriptor:
    def test_unknown_config_keys_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown config keys"):
            BackendDescriptor(kind="fixture", role="detector",
                              config={"proposals": {}, "bogus": 1})

    def test_external_requires_command(self):
        with pytest.raises(ConfigurationError, match="command"):
            BackendDescriptor(kind="external_process", role="classifier", config={})

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigurationError):
            BackendDescriptor(kind="onnx", role="detector", config={})


class TestStubDetector:
    def test_finds_dark_rectangle_within_one_stride(self):
        pixels = gray_pixels(128, 128, 200)
        pixels[40:80, 30:90] = 20
        backend = build_backend(BackendDescriptor(
            kind="heuristic_stub", role="detector", config={"stride": 8}))
        proposals = backend.propose(make_image(width=128, height=128), pixels)
        assert len(proposals) == 1
        x0, y0, x1, y1 = proposals[0].box.to_pixels(128, 128)
        # subsampling grid can shave at most one stride off each edge
        assert 30 <= x0 <= 30 + 8 and 90 - 8 <= x1 <= 90 + 8
        assert 40 <= y0 <= 40 + 8 and 80 - 8 <= y1 <= 80 + 8

    def test_uniform_image_yields_nothing(self):
        backend = build_backend(BackendDescriptor(
            kind="heuristic_stub", role="detector", config={}))
        assert backend.propose(make_image(width=64, height=64), gray_pixels(64, 64)) == []


class TestStubSegmenter:
    def test_masks_darker_than_mean(self):
        crop = gray_pixels(20, 20, 200)
        crop[5:15, 5:15] = 10
        backend = build_backend(BackendDescriptor(
            kind="heuristic_stub", role="segmenter", config={}))
        mask = backend.segment(crop, None)
        assert mask.bitmap[10, 10]
        assert not mask.bitmap[0, 0]


class TestRegionProposal:
    def test_confidence_bounds(self):
        with pytest.raises(DataError):
            RegionProposal(box=BoundingBox(0.1, 0.1, 0.2, 0.2), confidence=1.5)
