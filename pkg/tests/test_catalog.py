from __future__ import annotations

import xml.etree.ElementTree as ET
from datetime import datetime, timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wildtriage.catalog import (
    Annotation,
    BoundingBox,
    BurstPolicy,
    Catalog,
    annotation_to_xml,
    bursts_to_text,
    group_bursts,
    infer_infrared,
    ingest_manifest,
    iter_annotation_elements,
    parse_box_annotations,
)
from wildtriage.errors import (
    AnnotationError,
    CoordinateClampWarning,
    DataError,
    ManifestError,
    PartialBurstWarning,
)

from .conftest import gray_pixels, make_image, make_images, write_manifest


def _manifest_rows(n=5, cameras=("1", "2", "3")):
    rows = []
    base = datetime(2021, 6, 1)
    for i in range(n):
        rows.append({
            "image_id": f"img-{i:04d}",
            "camera_id": cameras[i % len(cameras)],
            "captured_at": (base + timedelta(seconds=10 * i)).isoformat(),
            "file": "synthetic://scene/x",
        })
    return rows


class TestIngestManifest:
    def test_empty_manifest_yields_empty_catalog(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        assert len(ingest_manifest(path)) == 0

    def test_header_only_manifest_yields_empty_catalog(self, tmp_path):
        path = write_manifest(tmp_path / "m.csv", [])
        assert len(ingest_manifest(path)) == 0

    def test_duplicate_image_id_rejected_by_name(self, tmp_path):
        rows = _manifest_rows(2)
        rows[1]["image_id"] = rows[0]["image_id"] = "C1_0001"
        path = write_manifest(tmp_path / "m.csv", rows)
        with pytest.raises(ManifestError, match="C1_0001"):
            ingest_manifest(path)

    def test_ordering_matches_independent_sort_oracle(self, tmp_path):
        rows = _manifest_rows(5)
        rows.reverse()  # scrambled input order
        path = write_manifest(tmp_path / "m.csv", rows)
        catalog = ingest_manifest(path)
        assert len(catalog) == 5
        oracle = sorted(
            rows, key=lambda r: (r["camera_id"], r["captured_at"], r["image_id"]))
        assert [im.image_id for im in catalog] == [r["image_id"] for r in oracle]

    def test_malformed_record_reports_line_number(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "image_id,camera_id,captured_at,file,width,height,source\n"
            "a,1,2021-06-01T00:00:00,synthetic://scene/x,100,100,captivity\n"
            "b,1,not-a-date,synthetic://scene/x,100,100,captivity\n",
            encoding="utf-8",
        )
        with pytest.raises(ManifestError, match="line 3"):
            ingest_manifest(path)

    def test_missing_image_file_rejected_unless_no_pixels(self, tmp_path):
        rows = [{"image_id": "a", "camera_id": "1",
                 "captured_at": "2021-06-01T00:00:00", "file": "gone.png"}]
        path = write_manifest(tmp_path / "m.csv", rows)
        with pytest.raises(ManifestError, match="gone.png"):
            ingest_manifest(path)
        catalog = ingest_manifest(path, no_pixels=True)
        assert catalog.get("a").is_infrared is False

    def test_infrared_derived_from_pixels_when_flag_absent(self, tmp_path):
        from PIL import Image

        gray = gray_pixels(8, 8, 100)
        color = gray.copy()
        color[:, :, 0] += 30
        Image.fromarray(gray).save(tmp_path / "gray.png")
        Image.fromarray(color).save(tmp_path / "color.png")
        rows = [
            {"image_id": "g", "camera_id": "1",
             "captured_at": "2021-06-01T00:00:00", "file": "gray.png",
             "width": 8, "height": 8},
            {"image_id": "c", "camera_id": "1",
             "captured_at": "2021-06-01T00:00:01", "file": "color.png",
             "width": 8, "height": 8},
        ]
        path = write_manifest(tmp_path / "m.csv", rows, include_infrared=False)
        catalog = ingest_manifest(path)
        assert catalog.get("g").is_infrared is True
        assert catalog.get("c").is_infrared is False

    def test_timestamp_required_for_captivity(self):
        with pytest.raises(ManifestError, match="timestamp"):
            make_image(captured_at=None, source="captivity")

    def test_serialization_round_trips(self, tmp_path):
        path = write_manifest(tmp_path / "m.csv", _manifest_rows(7))
        catalog = ingest_manifest(path)
        text = catalog.to_manifest_text()
        path2 = tmp_path / "m2.csv"
        path2.write_text(text, encoding="utf-8")
        again = ingest_manifest(path2)
        assert again.to_manifest_text() == text


class TestInferInfrared:
    def test_equal_channels_is_infrared(self):
        assert infer_infrared(gray_pixels(16, 16, 77)) is True

    def test_offset_channels_is_not(self):
        pixels = gray_pixels(16, 16, 100)
        pixels[:, :, 2] += 10
        assert infer_infrared(pixels) is False

    def test_tolerance_of_two_levels(self):
        pixels = gray_pixels(16, 16, 100)
        pixels[:, :, 1] += 2  # within tolerance
        assert infer_infrared(pixels) is True


def _voc_xml(tmp_path, objects, width=100, height=100, name="Wildcat"):
    parts = [
        "<annotation><filename>img-0001</filename>",
        f"<size><width>{width}</width><height>{height}</height><depth>3</depth></size>",
    ]
    for obj in objects:
        parts.append("<object>")
        parts.append(f"<name>{obj.get('name', name)}</name>")
        if "box" in obj:
            xmin, ymin, xmax, ymax = obj["box"]
            parts.append(
                f"<bndbox><xmin>{xmin}</xmin><ymin>{ymin}</ymin>"
                f"<xmax>{xmax}</xmax><ymax>{ymax}</ymax></bndbox>"
            )
        parts.append("</object>")
    parts.append("</annotation>")
    path = tmp_path / "ann.xml"
    path.write_text("".join(parts), encoding="utf-8")
    return path


class TestParseBoxAnnotations:
    def test_pixel_coordinates_normalized(self, tmp_path):
        path = _voc_xml(tmp_path, [{"box": (25, 25, 75, 75)}])
        ann = parse_box_annotations(path, make_image())
        assert ann.boxes[0][0] == BoundingBox(0.25, 0.25, 0.75, 0.75)
        assert ann.boxes[0][1] == "Wildcat"

    def test_missing_bndbox_is_parse_error(self, tmp_path):
        path = _voc_xml(tmp_path, [{}])
        with pytest.raises(AnnotationError, match="bndbox"):
            parse_box_annotations(path, make_image())

    def test_missing_name_is_parse_error(self, tmp_path):
        path = tmp_path / "ann.xml"
        path.write_text(
            "<annotation><object><bndbox><xmin>1</xmin><ymin>1</ymin>"
            "<xmax>2</xmax><ymax>2</ymax></bndbox></object></annotation>",
            encoding="utf-8",
        )
        with pytest.raises(AnnotationError, match="name"):
            parse_box_annotations(path, make_image())

    def test_out_of_range_clamped_with_one_warning(self, tmp_path):
        path = _voc_xml(tmp_path, [{"box": (-5, 0, 110, 100)}])
        with pytest.warns(CoordinateClampWarning) as captured:
            ann = parse_box_annotations(path, make_image())
        assert len(captured) == 1
        assert ann.boxes[0][0] == BoundingBox(0.0, 0.0, 1.0, 1.0)

    def test_degenerate_after_clamp_is_error(self, tmp_path):
        path = _voc_xml(tmp_path, [{"box": (120, 10, 140, 20)}])
        with pytest.warns(CoordinateClampWarning):
            with pytest.raises(AnnotationError, match="degenerate"):
                parse_box_annotations(path, make_image())

    def test_size_mismatch_is_error(self, tmp_path):
        path = _voc_xml(tmp_path, [{"box": (1, 1, 2, 2)}], width=640, height=480)
        with pytest.raises(AnnotationError, match="size"):
            parse_box_annotations(path, make_image(width=100, height=100))

    def test_xml_round_trip_through_writer(self, tmp_path):
        image = make_image()
        ann = Annotation(
            image_id=image.image_id,
            boxes=((BoundingBox(0.1, 0.2, 0.5, 0.6), "AnimalOther"),),
        )
        text = annotation_to_xml(ann, image)
        element = ET.fromstring(text)
        parsed = parse_box_annotations(element, image)
        assert parsed.boxes == ann.boxes

    def test_iter_annotation_elements_handles_container_roots(self, tmp_path):
        image = make_image()
        ann = Annotation(image_id=image.image_id, boxes=())
        doc = "<annotations>" + annotation_to_xml(ann, image) * 2 + "</annotations>"
        path = tmp_path / "multi.xml"
        path.write_text(doc, encoding="utf-8")
        assert len(list(iter_annotation_elements(path))) == 2


class TestBoundingBox:
    def test_invalid_ranges_rejected(self):
        with pytest.raises(DataError):
            BoundingBox(0.5, 0.1, 0.5, 0.9)
        with pytest.raises(DataError):
            BoundingBox(-0.1, 0.1, 0.5, 0.9)

    @given(
        xmin=st.integers(0, 98), ymin=st.integers(0, 98),
        w=st.integers(1, 50), h=st.integers(1, 50),
    )
    def test_pixel_round_trip_within_one_pixel(self, xmin, ymin, w, h):
        xmax = min(100, xmin + w)
        ymax = min(100, ymin + h)
        box = BoundingBox.from_pixels(xmin, ymin, xmax, ymax, 100, 100)
        back = box.to_pixels(100, 100)
        assert all(abs(a - b) <= 1 for a, b in zip(back, (xmin, ymin, xmax, ymax)))


class TestGroupBursts:
    def test_gap_rule_splits_on_long_gap(self):
        base = datetime(2021, 6, 1)
        gaps = [0, 1, 2, 302, 303, 304]
        images = [
            make_image(image_id=f"i{k}", captured_at=base + timedelta(seconds=s))
            for k, s in enumerate(gaps)
        ]
        bursts = group_bursts(images, BurstPolicy(gap_seconds=5.0))
        assert [len(b) for b in bursts] == [3, 3]

    def test_empty_list_gives_empty_bursts(self):
        assert group_bursts([], BurstPolicy()) == []

    def test_fixed_count_eight_gives_two_bursts(self):
        images = make_images(16, camera_id="3")
        bursts = group_bursts(images, BurstPolicy(fixed_counts={"3": 8}))
        assert [len(b) for b in bursts] == [8, 8]
        assert all(not b.partial for b in bursts)

    def test_fixed_count_trailing_partial_flagged(self):
        images = make_images(10, camera_id="3")
        with pytest.warns(PartialBurstWarning):
            bursts = group_bursts(images, BurstPolicy(fixed_counts={"3": 8}))
        assert [len(b) for b in bursts] == [8, 2]
        assert bursts[-1].partial

    def test_missing_timestamp_is_error(self):
        image = make_image(source="external", captured_at=None)
        with pytest.raises(DataError, match="timestamp"):
            group_bursts([image], BurstPolicy())

    @settings(max_examples=50, deadline=None)
    @given(
        counts=st.lists(st.integers(1, 12), min_size=1, max_size=4),
        gaps=st.lists(st.sampled_from([1, 2, 30, 600]), min_size=1, max_size=40),
    )
    def test_partition_property(self, counts, gaps):
        base = datetime(2021, 6, 1)
        images = []
        k = 0
        for cam_index, n in enumerate(counts):
            t = base
            for i in range(n):
                t += timedelta(seconds=gaps[(k + i) % len(gaps)])
                images.append(make_image(
                    image_id=f"c{cam_index}-{i}",
                    camera_id=str(cam_index),
                    captured_at=t,
                ))
            k += n
        bursts = group_bursts(images, BurstPolicy(gap_seconds=5.0))
        seen = [iid for b in bursts for iid in b.image_ids]
        assert sorted(seen) == sorted(im.image_id for im in images)
        assert len(set(seen)) == len(seen)
        for burst in bursts:
            cams = {next(im.camera_id for im in images if im.image_id == iid)
                    for iid in burst.image_ids}
            assert cams == {burst.camera_id}

    def test_grouping_deterministic_serialization(self, tmp_path):
        rows = _manifest_rows(9)
        path = write_manifest(tmp_path / "m.csv", rows)
        first = ingest_manifest(path)
        second = ingest_manifest(path)
        policy = BurstPolicy(gap_seconds=15.0)
        assert first.to_manifest_text() == second.to_manifest_text()
        assert bursts_to_text(group_bursts(first.images, policy)) == \
            bursts_to_text(group_bursts(second.images, policy))


class TestCatalogContainer:
    def test_unknown_image_lookup_raises(self):
        catalog = Catalog(images=(make_image(),))
        with pytest.raises(ManifestError, match="nope"):
            catalog.get("nope")

    def test_duplicate_in_constructor_rejected(self):
        with pytest.raises(ManifestError):
            Catalog(images=(make_image(), make_image()))
