from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from wildtriage.catalog import parse_box_annotations
from wildtriage.curation import BACKGROUND, FOUR_CLASS, WILDCAT
from wildtriage.ensemble import PipelineConfig
from wildtriage.errors import DataError, UnsupportedOverrideError
from wildtriage.service import RunStore, create_app, replay_decisions, whatif_for_dir


def _fixture_config(fixture_root: Path, **overrides) -> dict:
    data = json.loads((fixture_root / "experiment.json").read_text())

    def resolve(descriptor):
        config = dict(descriptor["config"])
        for key in ("proposals_file", "scores_file"):
            if key in config:
                config[key] = str(fixture_root / config[key])
        return {**descriptor, "config": config}

    config = {
        "taxonomy": "four-class",
        "detector": resolve(data["detector"]),
        "local_classifiers": [resolve(d) for d in data["classifiers"]["four-class"]["local"]],
        "segmenter": data["segmenter"],
        "segmentation": False,
        "min_confidence": 0.1,
        "seed": 7,
    }
    config.update(overrides)
    return config


@pytest.fixture(scope="module")
def store_with_run(tmp_path_factory, fixture_tree):
    store = RunStore(tmp_path_factory.mktemp("store"))
    config = PipelineConfig.from_dict(_fixture_config(fixture_tree.root))
    run_id = store.create_run(fixture_tree.manifest, config, run_id="run-0001")
    return store, run_id


class TestRunStore:
    def test_unknown_run_rejected(self, store_with_run):
        store, _ = store_with_run
        with pytest.raises(DataError, match="unknown run"):
            store.run_record("run-9999")

    def test_run_record_has_hash_and_versions(self, store_with_run):
        store, run_id = store_with_run
        record = store.run_record(run_id)
        assert record["run_id"] == run_id
        assert record["config_hash"]
        assert "detector" in record["backend_versions"]
        assert record["n_images"] == 200


class TestReviewQueue:
    def test_wildcat_entries_come_first(self, store_with_run):
        store, run_id = store_with_run
        queue = store.build_review_queue(run_id)
        labels = [e.final_label for e in queue]
        first_non_wildcat = next(
            (i for i, label in enumerate(labels) if label != WILDCAT), len(labels))
        assert WILDCAT not in labels[first_non_wildcat:]

    def test_ordering_matches_independent_sort_oracle(self, store_with_run):
        store, run_id = store_with_run
        taxonomy = store.taxonomy(run_id)
        records = store.records(run_id)

        def oracle_key(record):
            best = 0.0
            for votes in [*record.get("box_votes", []), record.get("global_votes", [])]:
                for vote in votes:
                    best = max(best, vote["scores"][0])
            return (taxonomy.priority(record["final_label"]), -best, record["image_id"])

        expected = [r["image_id"] for r in sorted(records, key=oracle_key)]
        got = [e.image_id for e in store.build_review_queue(run_id)]
        assert got == expected

    def test_filter_restricts_labels(self, store_with_run):
        store, run_id = store_with_run
        queue = store.build_review_queue(run_id, {WILDCAT})
        assert queue and all(e.final_label == WILDCAT for e in queue)

    def test_empty_run_yields_empty_queue(self, tmp_path, fixture_tree):
        store = RunStore(tmp_path / "s2")
        empty_manifest = tmp_path / "empty.csv"
        empty_manifest.write_text(
            "image_id,camera_id,captured_at,file,width,height,source\n")
        config = PipelineConfig.from_dict(_fixture_config(fixture_tree.root))
        run_id = store.create_run(empty_manifest, config)
        assert store.build_review_queue(run_id) == []


class TestDecisions:
    def test_log_grows_by_one_record(self, store_with_run):
        store, run_id = store_with_run
        image_id = store.records(run_id)[0]["image_id"]
        before, _ = store.decisions(run_id)
        out = store.submit_decision(run_id, image_id, "eco-1", WILDCAT)
        after, active = store.decisions(run_id)
        assert out["status"] == "accepted"
        assert len(after) == len(before) + 1
        assert active[image_id]["decided_label"] == WILDCAT

    def test_identical_payload_acknowledged_as_duplicate(self, store_with_run):
        store, run_id = store_with_run
        image_id = store.records(run_id)[1]["image_id"]
        first = store.submit_decision(run_id, image_id, "eco-1", BACKGROUND)
        before, _ = store.decisions(run_id)
        second = store.submit_decision(run_id, image_id, "eco-1", BACKGROUND)
        after, _ = store.decisions(run_id)
        assert first["status"] == "accepted"
        assert second["status"] == "duplicate"
        assert len(after) == len(before)

    def test_conflicting_decisions_keep_history_latest_active(self, store_with_run):
        store, run_id = store_with_run
        image_id = store.records(run_id)[2]["image_id"]
        store.submit_decision(run_id, image_id, "eco-1", WILDCAT)
        store.submit_decision(run_id, image_id, "eco-2", BACKGROUND)
        history, active = store.decisions(run_id)
        mine = [h for h in history if h["image_id"] == image_id]
        assert len(mine) == 2
        assert active[image_id]["decided_label"] == BACKGROUND
        # replay oracle: rebuilding from raw log lines gives the same state
        log = (store.run_dir(run_id) / "decisions.ndjson").read_text().splitlines()
        replayed_history, replayed_active = replay_decisions(log)
        assert replayed_active[image_id] == active[image_id]
        assert len(replayed_history) == len(history)

    def test_invalid_label_rejected(self, store_with_run):
        store, run_id = store_with_run
        image_id = store.records(run_id)[0]["image_id"]
        with pytest.raises(DataError, match="Badger"):
            store.submit_decision(run_id, image_id, "eco-1", "Badger")

    def test_unknown_image_rejected(self, store_with_run):
        store, run_id = store_with_run
        with pytest.raises(DataError, match="unknown image"):
            store.submit_decision(run_id, "ghost", "eco-1", WILDCAT)

    def test_queue_monotonicity_under_decisions(self, store_with_run):
        store, run_id = store_with_run
        before = [e.image_id for e in store.build_review_queue(run_id)]
        target = before[len(before) // 2]
        store.submit_decision(run_id, target, "eco-3", BACKGROUND)
        after = [e.image_id for e in store.build_review_queue(run_id)]
        assert before == after


class TestWhatIf:
    def test_identity_overrides_move_nothing(self, store_with_run):
        store, run_id = store_with_run
        summary = store.whatif(run_id, {})
        assert summary["moved"] == []
        counts = summary["label_counts"]
        assert sum(counts.values()) == len(store.records(run_id))

    def test_method_flip_moves_images_toward_priority_classes(self, store_with_run):
        store, run_id = store_with_run
        summary = store.whatif(run_id, {"vote_method": "hierarchical"})
        for move in summary["moved"]:
            from_p = store.taxonomy(run_id).priority(move["from"])
            to_p = store.taxonomy(run_id).priority(move["to"])
            assert to_p < from_p  # hierarchical can only promote priority

    def test_crafted_three_vote_fixture_flips_background_to_wildcat(
            self, tmp_path, fixture_tree):
        # two models say Background, one says Wildcat
        run_dir = tmp_path / "crafted"
        run_dir.mkdir()
        votes = []
        for model_id, label, top in (("a", BACKGROUND, 0.8), ("b", BACKGROUND, 0.8),
                                     ("c", WILDCAT, 0.9)):
            scores = [0.1 / 1.5] * 4
            scores[FOUR_CLASS.priority(label)] = 0.9 if top == 0.9 else 0.8
            total = sum(scores)
            votes.append({
                "model_id": model_id, "scale": "local", "box_index": 0,
                "label": label, "scores": [s / total for s in scores],
            })
        record = {
            "image_id": "crafted-1", "final_label": BACKGROUND,
            "method": "best_accuracy", "aggregation": "priority",
            "boxes": [{"box": [0.1, 0.1, 0.5, 0.5], "confidence": 0.9,
                       "detector_class": "animal"}],
            "box_votes": [votes], "box_labels": [BACKGROUND],
            "global_votes": [], "audit": [],
        }
        (run_dir / "run.json").write_text(json.dumps({
            "run_id": "crafted", "taxonomy": FOUR_CLASS.to_dict(),
            "config": {"vote_method": "best_accuracy", "aggregation": "priority",
                       "min_confidence": 0.1},
            "manifest_root": ".", "status": "ok",
            "n_images": 1, "n_results": 1, "n_failures": 0,
        }))
        (run_dir / "results.ndjson").write_text(json.dumps(record) + "\n")
        summary = whatif_for_dir(run_dir, {"vote_method": "hierarchical"})
        assert summary["moved"] == [
            {"image_id": "crafted-1", "from": BACKGROUND, "to": WILDCAT}]

    def test_random_fixture_matches_recompute_oracle(self, store_with_run):
        from wildtriage.ensemble import BoxVotes, RegionProposal, Vote, decide_image
        from wildtriage.stages import ClassScores
        from wildtriage.catalog import BoundingBox

        store, run_id = store_with_run
        taxonomy = store.taxonomy(run_id)
        summary = store.whatif(run_id, {"vote_method": "hierarchical",
                                        "min_confidence": 0.5})
        moved = {m["image_id"]: m["to"] for m in summary["moved"]}
        for record in store.records(run_id):
            box_votes = [
                BoxVotes(
                    proposal=RegionProposal(
                        box=BoundingBox(*box["box"]),
                        confidence=box["confidence"],
                        detector_class=box["detector_class"],
                    ),
                    votes=tuple(
                        Vote(model_id=v["model_id"], scale=v["scale"],
                             scores=ClassScores(taxonomy=taxonomy.name,
                                                scores=tuple(v["scores"])),
                             argmax_label=v["label"], box_index=v["box_index"])
                        for v in votes
                    ),
                )
                for box, votes in zip(record["boxes"], record["box_votes"])
            ]
            final, _ = decide_image(
                record["image_id"], box_votes, [], taxonomy,
                method="hierarchical", policy="priority", min_confidence=0.5)
            expected = final.final_label
            got = moved.get(record["image_id"], record["final_label"])
            assert got == expected

    def test_lowering_threshold_is_unsupported(self, store_with_run):
        store, run_id = store_with_run
        with pytest.raises(UnsupportedOverrideError, match="raised"):
            store.whatif(run_id, {"min_confidence": 0.01})

    def test_whatif_leaves_run_bytes_identical(self, store_with_run):
        store, run_id = store_with_run
        run_dir = store.run_dir(run_id)
        immutable = ["run.json", "results.ndjson", "failures.ndjson", "catalog.csv"]
        before = {name: (run_dir / name).read_bytes() for name in immutable}
        store.whatif(run_id, {"vote_method": "hierarchical"})
        store.whatif(run_id, {"min_confidence": 0.9})
        after = {name: (run_dir / name).read_bytes() for name in immutable}
        assert before == after


class TestExport:
    def test_empty_export_has_header_metadata(self, tmp_path, fixture_tree):
        store = RunStore(tmp_path / "s3")
        config = PipelineConfig.from_dict(_fixture_config(fixture_tree.root))
        run_id = store.create_run(fixture_tree.manifest, config)
        payload = store.export_decisions(run_id, "records")
        lines = payload.strip().splitlines()
        assert len(lines) == 1
        header = json.loads(lines[0])
        assert header["record"] == "header" and header["n_decisions"] == 0

    def test_records_round_trip_reproduces_labels(self, store_with_run):
        store, run_id = store_with_run
        payload = store.export_decisions(run_id, "records")
        _, active = store.decisions(run_id)
        exported_active = {}
        for line in payload.strip().splitlines()[1:]:
            record = json.loads(line)
            if record["active"]:
                exported_active[record["image_id"]] = record["decided_label"]
        assert exported_active == {
            image_id: d["decided_label"] for image_id, d in active.items()}

    def test_xml_export_reingestable_with_box_geometry(self, store_with_run):
        store, run_id = store_with_run
        # pick a decided image that has stored boxes
        _, active = store.decisions(run_id)
        catalog = store.catalog(run_id)
        boxed = {
            r["image_id"]: r["boxes"] for r in store.records(run_id) if r["boxes"]}
        target = next(i for i in active if i in boxed)
        payload = store.export_decisions(run_id, "xml")
        root = ET.fromstring(payload)
        elements = {
            el.findtext("filename"): el for el in root.iter("annotation")}
        assert set(elements) == set(active)
        ann = parse_box_annotations(
            elements[target], catalog.get(target), label_set="wild")
        assert len(ann.boxes) == len(boxed[target])
        stored_pixels = [
            tuple(round(c * d) for c, d in zip(
                entry["box"],
                (catalog.get(target).width_px, catalog.get(target).height_px) * 2))
            for entry in boxed[target]
        ]
        parsed_pixels = [
            box.to_pixels(catalog.get(target).width_px, catalog.get(target).height_px)
            for box, _ in ann.boxes
        ]
        assert parsed_pixels == stored_pixels
        assert all(label == active[target]["decided_label"] for _, label in ann.boxes)

    def test_unknown_format_rejected(self, store_with_run):
        store, run_id = store_with_run
        with pytest.raises(DataError, match="format"):
            store.export_decisions(run_id, "parquet")


class TestHttpApi:
    @pytest.fixture()
    def client(self, tmp_path, fixture_tree):
        store = RunStore(tmp_path / "httpstore")
        app = create_app(store)
        client = TestClient(app)
        body = {
            "manifest": str(fixture_tree.manifest),
            "config": _fixture_config(fixture_tree.root, segmentation=True),
            "run_id": "http-run",
        }
        response = client.post("/runs", json=body)
        assert response.status_code == 200, response.text
        return client

    def test_run_lifecycle_over_http(self, client):
        record = client.get("/runs/http-run").json()
        assert record["n_images"] == 200

        queue = client.get("/runs/http-run/queue", params={"page_size": 10}).json()
        assert queue["total"] == 200 and len(queue["entries"]) == 10
        entry = queue["entries"][0]

        decision = {"image_id": entry["image_id"], "reviewer": "eco",
                    "decided_label": WILDCAT}
        first = client.post("/runs/http-run/decisions", json=decision)
        assert first.json()["status"] == "accepted"
        assert client.post("/runs/http-run/decisions", json=decision).json()[
            "status"] == "duplicate"

        stats = client.get("/runs/http-run/stats").json()
        assert stats["images_reviewed"] == 1
        assert stats["review_rate_per_minute"] == 25.0

        whatif = client.get("/runs/http-run/whatif",
                            params={"method": "hierarchical"}).json()
        assert "label_counts" in whatif and "moved" in whatif

        export = client.get("/runs/http-run/export", params={"format": "records"})
        assert export.headers["content-type"].startswith("application/x-ndjson")

    def test_artifact_endpoints_stream_png(self, client):
        queue = client.get("/runs/http-run/queue",
                           params={"filter": WILDCAT, "page_size": 5}).json()
        entry = next(e for e in queue["entries"] if "crop" in e["artifacts"])
        listing = client.get(f"/images/{entry['image_id']}/artifacts",
                             params={"run": "http-run"}).json()
        assert "original" in listing
        for kind in ("original", "crop", "masked_crop"):
            response = client.get(
                f"/images/{entry['image_id']}/artifacts",
                params={"run": "http-run", "kind": kind, "box": 0})
            assert response.status_code == 200, (kind, response.text)
            assert response.headers["content-type"] == "image/png"
            assert response.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_whatif_lowering_threshold_is_400(self, client):
        response = client.get("/runs/http-run/whatif", params={"min_conf": 0.0})
        assert response.status_code == 400
        assert "raised" in response.json()["detail"]

    def test_unknown_run_is_404(self, client):
        assert client.get("/runs/nope").status_code == 404

    def test_static_token_auth(self, tmp_path, fixture_tree):
        store = RunStore(tmp_path / "authstore")
        app = create_app(store, token="sekrit")
        client = TestClient(app)
        assert client.get("/runs/x").status_code == 401
        response = client.get("/runs/x", headers={"Authorization": "Bearer sekrit"})
        assert response.status_code == 404  # authorized, but run absent
