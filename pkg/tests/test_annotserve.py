import base64
import json
import threading
import urllib.error
import urllib.request
import zlib

import numpy as np
import pytest

from scancad.annotserve import AnnotationService, ServiceError, grid_payload, make_server
from scancad.benchmark import build_tasks, read_annotations
from scancad.datagen import generate_dataset
from scancad.embedspace import EmbeddingIndex, EmbeddingVector, propose_candidates
from scancad.voxel import Domain, unpack_occupancy

N_SAMPLES = 32


def _build(tmp_path, *, seed=0, lease_minutes=15.0, clock=None, hints=None, n=N_SAMPLES):
    samples = generate_dataset(n, seed=7)
    rng = np.random.default_rng(99)
    idx = EmbeddingIndex(8)
    for s in samples:
        idx.add(
            EmbeddingVector(
                id=s.sample_id, domain=Domain.CAD, category=s.category,
                values=rng.normal(size=8).astype(np.float32),
            )
        )
    pairs = [(s, (hints or {}).get(s.sample_id)) for s in samples]
    kwargs = {"seed": seed, "lease_minutes": lease_minutes}
    if clock is not None:
        kwargs["clock"] = clock
    svc = AnnotationService(pairs, idx, tmp_path / "annotations.jsonl", **kwargs)
    return svc, samples, idx


class TestServeTask:
    def test_payload_shape(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        payload = svc.serve_task()
        assert set(payload) == {"task_id", "scan", "proposals", "hint_image_url"}
        assert payload["scan"]["dims"] == [32, 32, 32]
        assert len(payload["proposals"]) == 6
        for p in payload["proposals"]:
            assert set(p) == {"cad_id", "grid"}
            assert p["grid"]["dims"] == [32, 32, 32]

    def test_hint_passthrough(self, tmp_path):
        samples = generate_dataset(N_SAMPLES, seed=7)
        first = min(s.sample_id for s in samples)
        svc, _, _ = _build(tmp_path, hints={first: "http://x/hint.png"})
        payload = svc.serve_task()
        assert payload["hint_image_url"] == "http://x/hint.png"

    def test_proposals_match_deterministic_sampler(self, tmp_path):
        svc, samples, idx = _build(tmp_path, seed=5)
        payload = svc.serve_task()
        scan_id = payload["task_id"].split("#")[0]
        expected_seed = 5 * (1 << 32) + zlib.crc32(scan_id.encode())
        expected = propose_candidates(idx, scan_id, expected_seed)
        assert [p["cad_id"] for p in payload["proposals"]] == expected

    def test_least_annotated_first(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        first = svc.serve_task()
        assert first["task_id"].split("#")[0] == min(s.sample_id for s in samples)

    def test_leases_block_reserving(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        a = svc.serve_task()
        b = svc.serve_task()
        assert a["task_id"].split("#")[0] != b["task_id"].split("#")[0]

    def test_annotator_polling_is_idempotent(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        a = svc.serve_task(annotator="alice")
        b = svc.serve_task(annotator="alice")
        assert a["task_id"] == b["task_id"]
        c = svc.serve_task(annotator="bob")
        assert c["task_id"] != a["task_id"]

    def test_exhaustion_returns_none(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        for _ in samples:
            assert svc.serve_task() is not None
        assert svc.serve_task() is None

    def test_lease_expiry_reserves_same_proposals(self, tmp_path):
        now = [0.0]
        svc, samples, _ = _build(tmp_path, lease_minutes=15.0, clock=lambda: now[0])
        first = svc.serve_task()
        for _ in range(len(samples) - 1):
            svc.serve_task()
        assert svc.serve_task() is None
        now[0] += 15 * 60 + 1
        again = svc.serve_task()
        assert again is not None
        assert again["task_id"] != first["task_id"]
        assert again["task_id"].split("#")[0] == first["task_id"].split("#")[0]
        assert again["proposals"] == first["proposals"]

    def test_missing_latent_fails_at_startup(self, tmp_path):
        samples = generate_dataset(31, seed=7)
        orphan = generate_dataset(1, seed=9, categories=("table",))[0]
        idx = EmbeddingIndex(4)
        rng = np.random.default_rng(0)
        for s in samples:
            idx.add(EmbeddingVector(id=s.sample_id, domain=Domain.CAD, category=s.category,
                                    values=rng.normal(size=4).astype(np.float32)))
        pairs = [(s, None) for s in samples] + [(orphan, None)]
        with pytest.raises(KeyError):
            AnnotationService(pairs, idx, tmp_path / "a.jsonl")


class TestSubmit:
    def test_valid_submission_round_trips(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        payload = svc.serve_task()
        picks = [p["cad_id"] for p in payload["proposals"]][:2]
        record = svc.submit(payload["task_id"], picks, "alice")
        assert record.ranked_selection == tuple(picks)
        assert record.annotator == "alice"
        stored = read_annotations(tmp_path / "annotations.jsonl")
        assert stored == [record]
        # consumable downstream: build a retrieval task around it
        catalog = {f"foil_{i:03d}": "nothing_like_it" for i in range(120)}
        catalog.update({cid: record.category for cid in record.proposed})
        tasks = build_tasks(stored, catalog, seed=0)
        assert len(tasks) == 1

    def test_scan_category_recorded(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        payload = svc.serve_task()
        sid = payload["task_id"].split("#")[0]
        category = next(s.category for s in samples if s.sample_id == sid)
        record = svc.submit(payload["task_id"], [payload["proposals"][0]["cad_id"]], "a")
        assert record.category == category

    def test_non_proposed_selection(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        payload = svc.serve_task()
        with pytest.raises(ServiceError) as exc:
            svc.submit(payload["task_id"], ["not-a-proposal"], "alice")
        assert exc.value.status == 400

    @pytest.mark.parametrize("picker", [lambda ids: [], lambda ids: ids[:4], lambda ids: [ids[0]] * 2])
    def test_bad_selection_shapes(self, tmp_path, picker):
        svc, _, _ = _build(tmp_path)
        payload = svc.serve_task()
        ids = [p["cad_id"] for p in payload["proposals"]]
        with pytest.raises(ServiceError) as exc:
            svc.submit(payload["task_id"], picker(ids), "alice")
        assert exc.value.status == 400

    def test_unknown_task(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        with pytest.raises(ServiceError) as exc:
            svc.submit("nope#00001", ["x"], "alice")
        assert exc.value.status == 404

    def test_duplicate_submission_conflicts(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        payload = svc.serve_task()
        pick = [payload["proposals"][0]["cad_id"]]
        svc.submit(payload["task_id"], pick, "alice")
        with pytest.raises(ServiceError) as exc:
            svc.submit(payload["task_id"], pick, "bob")
        assert exc.value.status == 409

    def test_empty_annotator(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        payload = svc.serve_task()
        with pytest.raises(ServiceError) as exc:
            svc.submit(payload["task_id"], [payload["proposals"][0]["cad_id"]], "  ")
        assert exc.value.status == 400

    def test_concurrent_submissions_one_winner(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        payload = svc.serve_task()
        pick = [payload["proposals"][0]["cad_id"]]
        n = 8
        barrier = threading.Barrier(n)
        results = []

        def worker(i):
            barrier.wait()
            try:
                svc.submit(payload["task_id"], pick, f"worker{i}")
                results.append("ok")
            except ServiceError as exc:
                results.append(exc.status)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results.count("ok") == 1
        assert results.count(409) == n - 1
        assert len(read_annotations(tmp_path / "annotations.jsonl")) == 1

    def test_submission_frees_scan_with_higher_count(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        payload = svc.serve_task()
        first_scan = payload["task_id"].split("#")[0]
        svc.submit(payload["task_id"], [payload["proposals"][0]["cad_id"]], "a")
        second = svc.serve_task()
        assert second["task_id"].split("#")[0] != first_scan


class TestRestart:
    def test_existing_annotations_shape_selection(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        done = set()
        for _ in range(3):
            payload = svc.serve_task()
            done.add(payload["task_id"].split("#")[0])
            svc.submit(payload["task_id"], [payload["proposals"][0]["cad_id"]], "a")
        fresh, _, _ = _build(tmp_path)
        assert fresh.stats()["total"] == 3
        nxt = fresh.serve_task()
        assert nxt["task_id"].split("#")[0] not in done

    def test_store_only_grows(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        path = tmp_path / "annotations.jsonl"
        sizes = []
        for _ in range(4):
            payload = svc.serve_task()
            svc.submit(payload["task_id"], [payload["proposals"][0]["cad_id"]], "a")
            sizes.append(path.stat().st_size)
            assert len(read_annotations(path)) == len(sizes)
        assert sizes == sorted(sizes)


class TestGrids:
    def test_cad_payload_round_trip(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        target = samples[3]
        payload = svc.grid(target.sample_id)
        raw = base64.b64decode(payload["occupancy"])
        occ = unpack_occupancy(raw, tuple(payload["dims"]))
        assert np.array_equal(occ, target.cad.occupancy)

    def test_scan_selector(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        target = samples[5]
        payload = svc.grid(f"{target.sample_id}:scan")
        occ = unpack_occupancy(base64.b64decode(payload["occupancy"]), tuple(payload["dims"]))
        assert np.array_equal(occ, target.scan.occupancy)

    def test_bit_count_matches(self, tmp_path):
        svc, samples, _ = _build(tmp_path)
        payload = svc.grid(samples[0].sample_id)
        occ = unpack_occupancy(base64.b64decode(payload["occupancy"]), tuple(payload["dims"]))
        assert int(occ.sum()) == samples[0].cad.count()

    def test_unknown_object(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        assert svc.grid("ghost") is None
        assert svc.grid("ghost:scan") is None


class TestStats:
    def test_counts(self, tmp_path):
        svc, _, _ = _build(tmp_path)
        for annotator in ("alice", "alice", "bob"):
            payload = svc.serve_task()
            svc.submit(payload["task_id"], [payload["proposals"][0]["cad_id"]], annotator)
        stats = svc.stats()
        assert stats["total"] == 3
        assert stats["per_annotator"] == {"alice": 2, "bob": 1}
        assert sum(stats["per_category"].values()) == 3
        assert stats["unannotated_scans"] == N_SAMPLES - 3


@pytest.fixture()
def http_service(tmp_path):
    svc, samples, _ = _build(tmp_path)
    server = make_server(svc)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base, svc, samples
    server.shutdown()
    server.server_close()


def _get(url):
    with urllib.request.urlopen(url) as resp:
        body = resp.read()
        return resp.status, json.loads(body) if body else None


def _post(url, payload):
    req = urllib.request.Request(
        url, data=json.dumps(payload).encode(), headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


class TestHttp:
    def test_task_endpoint(self, http_service):
        base, _, _ = http_service
        status, payload = _get(base + "/api/task")
        assert status == 200
        assert len(payload["proposals"]) == 6

    def test_annotation_endpoint_and_conflict(self, http_service):
        base, _, _ = http_service
        _, task = _get(base + "/api/task")
        body = {
            "task_id": task["task_id"],
            "ranked_selection": [task["proposals"][1]["cad_id"], task["proposals"][0]["cad_id"]],
            "annotator": "http-alice",
        }
        status, record = _post(base + "/api/annotation", body)
        assert status == 200
        assert record["ranked_selection"] == body["ranked_selection"]
        status, err = _post(base + "/api/annotation", body)
        assert status == 409
        assert "error" in err

    def test_concurrent_http_submissions(self, http_service):
        base, _, _ = http_service
        _, task = _get(base + "/api/task")
        body = {
            "task_id": task["task_id"],
            "ranked_selection": [task["proposals"][0]["cad_id"]],
            "annotator": "racer",
        }
        barrier = threading.Barrier(2)
        statuses = []

        def worker():
            barrier.wait()
            statuses.append(_post(base + "/api/annotation", dict(body))[0])

        threads = [threading.Thread(target=worker) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(statuses) == [200, 409]

    def test_voxels_endpoint(self, http_service):
        base, _, samples = http_service
        status, payload = _get(f"{base}/api/voxels/{samples[0].sample_id}")
        assert status == 200
        assert payload["dims"] == [32, 32, 32]
        status, err = _post(base + "/api/annotation", {})
        assert status == 400

    def test_voxels_unknown(self, http_service):
        base, _, _ = http_service
        try:
            urllib.request.urlopen(base + "/api/voxels/ghost")
            raised = False
        except urllib.error.HTTPError as exc:
            raised = exc.code == 404
        assert raised

    def test_stats_endpoint(self, http_service):
        base, _, _ = http_service
        status, payload = _get(base + "/api/stats")
        assert status == 200
        assert payload["total"] == 0

    def test_cors_headers(self, http_service):
        base, _, _ = http_service
        req = urllib.request.Request(base + "/api/task", method="OPTIONS")
        with urllib.request.urlopen(req) as resp:
            assert resp.status == 204
            assert resp.headers["Access-Control-Allow-Origin"] == "*"
        with urllib.request.urlopen(base + "/api/stats") as resp:
            assert resp.headers["Access-Control-Allow-Origin"] == "*"

    def test_bad_json_body(self, http_service):
        base, _, _ = http_service
        req = urllib.request.Request(
            base + "/api/annotation", data=b"{broken", headers={"Content-Type": "application/json"}
        )
        try:
            urllib.request.urlopen(req)
            status = 200
        except urllib.error.HTTPError as exc:
            status = exc.code
        assert status == 400
