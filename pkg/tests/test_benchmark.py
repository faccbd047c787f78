import json

import numpy as np
import pytest

from scancad.benchmark import (
    AggregateResult,
    AnnotationRecord,
    RetrievalTask,
    aggregate,
    build_tasks,
    category_accuracy,
    rank_candidates,
    ranking_quality,
    read_annotations,
    report_as_json,
    report_as_text,
    retrieval_accuracy,
    write_annotations,
)
from scancad.embedspace import EmbeddingIndex, EmbeddingVector
from scancad.voxel import Domain

TS = "2026-08-17T10:00:00Z"


def _record(scan_id="s0", proposed=None, ranked=None, category="chair"):
    proposed = proposed if proposed is not None else [f"p{i}" for i in range(6)]
    ranked = ranked if ranked is not None else [proposed[0]]
    return AnnotationRecord(
        scan_id=scan_id, proposed=tuple(proposed), ranked_selection=tuple(ranked),
        annotator="alice", category=category, timestamp=TS,
    )


def _index(id_to_vec, id_to_cat=None):
    dim = len(next(iter(id_to_vec.values())))
    idx = EmbeddingIndex(dim)
    for cid, vec in id_to_vec.items():
        cat = (id_to_cat or {}).get(cid, "chair")
        idx.add(EmbeddingVector(id=cid, domain=Domain.CAD, category=cat,
                                values=np.asarray(vec, dtype=np.float32)))
    return idx.freeze()


def _task_with_distances(task, dists, id_to_cat=None):
    """Index where candidate i sits at distance dists[i] along one axis."""
    vecs = {cid: [float(d), 0.0] for cid, d in zip(task.candidates, dists)}
    return _index(vecs, id_to_cat), np.zeros(2)


def _full_task(record=None, n_extra=0):
    record = record or _record()
    distractors = [f"d{i:03d}" for i in range(100)]
    return RetrievalTask(record, tuple(distractors))


class TestAnnotationRecord:
    def test_valid(self):
        r = _record(ranked=["p0", "p2", "p1"])
        assert r.ranked_selection == ("p0", "p2", "p1")

    def test_wrong_proposed_count(self):
        with pytest.raises(ValueError, match="6 proposals"):
            _record(proposed=["a", "b", "c"], ranked=["a"])

    def test_duplicate_proposed(self):
        with pytest.raises(ValueError, match="duplicate proposed"):
            _record(proposed=["a", "a", "b", "c", "d", "e"], ranked=["a"])

    def test_empty_ranked(self):
        with pytest.raises(ValueError, match="1..3"):
            _record(ranked=[])

    def test_too_many_ranked(self):
        with pytest.raises(ValueError, match="1..3"):
            _record(ranked=["p0", "p1", "p2", "p3"])

    def test_duplicate_ranked(self):
        with pytest.raises(ValueError, match="duplicate ids"):
            _record(ranked=["p0", "p0"])

    def test_ranked_not_subset(self):
        with pytest.raises(ValueError, match="subset"):
            _record(ranked=["zz"])

    def test_bad_timestamp(self):
        with pytest.raises(ValueError, match="timestamp"):
            AnnotationRecord(
                scan_id="s", proposed=tuple(f"p{i}" for i in range(6)),
                ranked_selection=("p0",), annotator="a", category="c",
                timestamp="yesterday",
            )

    def test_jsonl_round_trip(self, tmp_path):
        records = [_record("s0"), _record("s1", ranked=["p1", "p0"])]
        path = tmp_path / "ann.jsonl"
        write_annotations(path, records)
        assert read_annotations(path) == records

    def test_jsonl_append(self, tmp_path):
        path = tmp_path / "ann.jsonl"
        write_annotations(path, [_record("s0")])
        write_annotations(path, [_record("s1")], append=True)
        assert [r.scan_id for r in read_annotations(path)] == ["s0", "s1"]

    def test_jsonl_missing_field(self, tmp_path):
        path = tmp_path / "ann.jsonl"
        path.write_text(json.dumps({"scan_id": "s"}) + "\n")
        with pytest.raises(ValueError, match="missing fields"):
            read_annotations(path)

    def test_jsonl_malformed_line(self, tmp_path):
        path = tmp_path / "ann.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(ValueError, match="line 1"):
            read_annotations(path)


class TestRetrievalTask:
    def test_wrong_distractor_count(self):
        with pytest.raises(ValueError, match="100 distractors"):
            RetrievalTask(_record(), ("d0",) * 100 + ("d1",))

    def test_overlap_with_proposed(self):
        distractors = ["p0"] + [f"d{i}" for i in range(99)]
        with pytest.raises(ValueError, match="overlap"):
            RetrievalTask(_record(), tuple(distractors))

    def test_candidates_order(self):
        t = _full_task()
        assert t.candidates[:6] == t.record.proposed
        assert len(t.candidates) == 106


class TestBuildTasks:
    def _catalog(self, per_class=50, classes=("chair", "table", "shelf", "box", "lamp")):
        return {f"{c}_{i:03d}": c for c in classes for i in range(per_class)}

    def test_too_few_off_class(self):
        catalog = {f"chair_{i}": "chair" for i in range(200)}
        catalog.update({f"table_{i}": "table" for i in range(99)})
        record = _record("needle", category="chair")
        with pytest.raises(ValueError, match="needle"):
            build_tasks([record], catalog, seed=0)

    def test_deterministic(self):
        records = [_record(f"s{i}") for i in range(5)]
        catalog = self._catalog()
        a = build_tasks(records, catalog, seed=9)
        b = build_tasks(records, catalog, seed=9)
        assert all(x.distractors == y.distractors for x, y in zip(a, b))

    def test_different_seeds_differ(self):
        records = [_record("s0")]
        catalog = self._catalog()
        a = build_tasks(records, catalog, seed=1)[0]
        b = build_tasks(records, catalog, seed=2)[0]
        assert a.distractors != b.distractors

    def test_distractors_are_off_class(self):
        classes = ("chair", "table", "shelf", "box", "lamp")
        catalog = self._catalog()
        records = [_record(f"s{i}", category=classes[i % 5]) for i in range(500)]
        for task in build_tasks(records, catalog, seed=3):
            cats = {catalog[d] for d in task.distractors}
            assert task.record.category not in cats
            assert len(task.distractors) == 100
            assert not set(task.distractors) & set(task.record.proposed)


class TestRetrievalAccuracy:
    def test_exact_match_wins(self):
        record = _record(ranked=["p2"])
        task = _full_task(record)
        rng = np.random.default_rng(0)
        vecs = {cid: rng.normal(size=3) for cid in task.candidates}
        idx = _index(vecs)
        assert retrieval_accuracy(task, idx, vecs["p2"]) == 1

    def test_distractor_on_top(self):
        record = _record(ranked=["p0"])
        task = _full_task(record)
        rng = np.random.default_rng(1)
        vecs = {cid: rng.normal(size=3) + 10 for cid in task.candidates}
        vecs["d050"] = np.zeros(3)
        idx = _index(vecs)
        assert retrieval_accuracy(task, idx, np.zeros(3)) == 0

    def test_matches_sort_oracle(self):
        record = _record(ranked=["p0", "p3"])
        task = _full_task(record)
        rng = np.random.default_rng(2)
        for _ in range(100):
            vecs = {cid: rng.normal(size=4) for cid in task.candidates}
            idx = _index(vecs)
            q = rng.normal(size=4)
            oracle_top = min(
                (float(np.linalg.norm(v.astype(np.float64) - q)), cid) for cid, v in vecs.items()
            )[1]
            expected = int(oracle_top in record.ranked_selection)
            assert retrieval_accuracy(task, idx, q) == expected


class TestRankingQuality:
    def test_exact_order(self):
        record = _record(ranked=["p0", "p1", "p2"])
        task = _full_task(record)
        dists = [1.0, 2.0, 3.0, 50.0, 50.0, 50.0] + [100.0] * 100
        idx, q = _task_with_distances(task, dists)
        assert ranking_quality(task, idx, q) == 1.0

    def test_swapped_top_two(self):
        # annotated [p0, p1, p2], predicted [p1, p0, p2]: only slot 3 matches
        record = _record(ranked=["p0", "p1", "p2"])
        task = _full_task(record)
        dists = [2.0, 1.0, 3.0, 50.0, 50.0, 50.0] + [100.0] * 100
        idx, q = _task_with_distances(task, dists)
        assert ranking_quality(task, idx, q) == pytest.approx(1 / 3)

    def test_single_selection_top_one(self):
        record = _record(ranked=["p4"])
        task = _full_task(record)
        dists = [5.0, 6.0, 7.0, 8.0, 1.0, 9.0] + [100.0] * 100
        idx, q = _task_with_distances(task, dists)
        assert ranking_quality(task, idx, q) == 1.0

    def test_positive_implies_overlap(self):
        rng = np.random.default_rng(5)
        record = _record(ranked=["p0", "p1", "p2"])
        task = _full_task(record)
        for _ in range(50):
            vecs = {cid: rng.normal(size=3) for cid in task.candidates}
            idx = _index(vecs)
            q = rng.normal(size=3)
            quality = ranking_quality(task, idx, q)
            top3 = rank_candidates(task, idx, q)[:3]
            if quality > 0:
                assert set(top3) & set(record.ranked_selection)


class TestCategoryAccuracy:
    def test_all_match(self):
        record = _record(category="chair")
        task = _full_task(record)
        rng = np.random.default_rng(0)
        vecs = {cid: rng.normal(size=3) for cid in task.candidates}
        idx = _index(vecs, {cid: "chair" for cid in task.candidates})
        embeddings = {record.scan_id: rng.normal(size=3)}
        assert category_accuracy([task], idx, embeddings, k=1) == 1.0
        assert category_accuracy([task], idx, embeddings, k=5) == 1.0

    def test_none_match(self):
        record = _record(category="chair")
        task = _full_task(record)
        rng = np.random.default_rng(1)
        vecs = {cid: rng.normal(size=3) for cid in task.candidates}
        idx = _index(vecs, {cid: "lamp" for cid in task.candidates})
        embeddings = {record.scan_id: rng.normal(size=3)}
        assert category_accuracy([task], idx, embeddings, k=1) == 0.0
        assert category_accuracy([task], idx, embeddings, k=5) == 0.0

    def test_hand_counted_fixture(self):
        # nearest ten candidates at distances 1..10; categories chosen so the
        # top-5 holds chair at ranks 1, 3, 4 and the top-1 is a chair
        record = _record(category="chair")
        task = _full_task(record)
        near = list(task.candidates[:10])
        cats = dict.fromkeys(task.candidates, "lamp")
        for cid in (near[0], near[2], near[3], near[7]):
            cats[cid] = "chair"
        dists = list(range(1, 11)) + [100.0] * 96
        idx, q = _task_with_distances(task, dists, cats)
        embeddings = {record.scan_id: q}
        assert category_accuracy([task], idx, embeddings, k=1) == 1.0
        assert category_accuracy([task], idx, embeddings, k=5) == pytest.approx(3 / 5)

    def test_mean_over_tasks(self):
        rng = np.random.default_rng(3)
        tasks, embeddings, vecs, cats = [], {}, {}, {}
        for t in range(4):
            record = _record(f"s{t}", proposed=[f"t{t}p{i}" for i in range(6)],
                             ranked=[f"t{t}p0"], category="chair")
            task = RetrievalTask(record, tuple(f"t{t}d{i:03d}" for i in range(100)))
            tasks.append(task)
            for cid in task.candidates:
                vecs[cid] = rng.normal(size=3)
                cats[cid] = "chair" if t % 2 == 0 else "lamp"
            embeddings[record.scan_id] = rng.normal(size=3)
        idx = _index(vecs, cats)
        assert category_accuracy(tasks, idx, embeddings, k=1) == pytest.approx(0.5)


class TestAggregate:
    def test_single_category(self):
        agg = aggregate([0.1, 0.5, 0.9], ["chair"] * 3)
        assert agg.class_avg == pytest.approx(agg.inst_avg) == pytest.approx(0.5)

    def test_two_category_example(self):
        scores = [0.2] * 10 + [0.8] * 30
        cats = ["small"] * 10 + ["big"] * 30
        agg = aggregate(scores, cats)
        assert agg.class_avg == pytest.approx(0.5)
        assert agg.inst_avg == pytest.approx(0.65)

    def test_other_bucket(self):
        scores = [0.2] * 10 + [0.8] * 30
        cats = ["small"] * 10 + ["big"] * 30
        agg = aggregate(scores, cats, other_threshold=15)
        assert set(agg.per_class) == {"big", "other"}
        assert agg.per_class["other"].mean == pytest.approx(0.2)
        assert agg.per_class["other"].count == 10
        assert agg.per_class["big"].count == 30

    def test_threshold_zero_keeps_all(self):
        agg = aggregate([0.5, 0.7], ["a", "b"], other_threshold=0)
        assert set(agg.per_class) == {"a", "b"}

    def test_constant_scores(self):
        agg = aggregate([0.4] * 20, [f"c{i % 5}" for i in range(20)])
        assert agg.class_avg == pytest.approx(0.4)
        assert agg.inst_avg == pytest.approx(0.4)

    def test_many_category_oracle(self):
        rng = np.random.default_rng(8)
        cats = [f"cat{i:02d}" for i in range(31) for _ in range(rng.integers(1, 40))]
        scores = list(rng.uniform(size=len(cats)))
        agg = aggregate(scores, cats)
        by_cat = {}
        for s, c in zip(scores, cats):
            by_cat.setdefault(c, []).append(s)
        assert agg.inst_avg == pytest.approx(sum(scores) / len(scores), abs=1e-12)
        expected_class = sum(sum(v) / len(v) for v in by_cat.values()) / len(by_cat)
        assert agg.class_avg == pytest.approx(expected_class, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="scores"):
            aggregate([0.1], ["a", "b"])

    def test_empty(self):
        with pytest.raises(ValueError, match="nothing"):
            aggregate([], [])


class TestReports:
    def _results(self):
        scores = [0.2] * 10 + [0.8] * 30
        cats = ["small"] * 10 + ["big"] * 30
        return {
            "retrieval": aggregate(scores, cats),
            "ranking": aggregate([s / 2 for s in scores], cats),
        }

    def test_json_report(self):
        payload = json.loads(report_as_json(self._results()))
        assert payload["retrieval"]["class_avg"] == pytest.approx(0.5)
        assert payload["ranking"]["per_class"]["big"]["count"] == 30

    def test_text_report_layout(self):
        text = report_as_text(self._results())
        lines = text.splitlines()
        assert lines[0].split() == ["class", "retrieval", "ranking"]
        assert lines[-1].startswith("inst avg")
        assert lines[-2].startswith("class avg")
        assert any(l.startswith("other") for l in lines)
        body = [l for l in lines if l.startswith("big")][0]
        assert "0.800" in body and "0.400" in body
