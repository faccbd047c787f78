"""Retrieval benchmark over human annotations.

An annotation names up to three CADs, in similarity order, picked from six
proposals for one scan. A retrieval task pads those six with 100 random
different-class distractors; the metrics then ask how a model ranks the
106 candidates against the annotated ground truth:

- retrieval accuracy: is the top-1 candidate one of the annotated models?
- ranking quality: positional agreement of the predicted top-n with the
  annotated order (n = number of annotated models).
- category accuracy: do the best-ranked candidates share the query's class?

Scores aggregate two ways: inst_avg over tasks, class_avg over per-category
means. Everything is a pure function of frozen inputs, with distance ties
broken by id so results are reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .embedspace import EmbeddingIndex
from .voxel import Domain

PROPOSED_COUNT = 6
MAX_RANKED = 3
DISTRACTOR_COUNT = 100

_RECORD_FIELDS = ("scan_id", "proposed", "ranked_selection", "annotator", "category", "timestamp")


@dataclass(frozen=True)
class AnnotationRecord:
    scan_id: str
    proposed: tuple[str, ...]
    ranked_selection: tuple[str, ...]
    annotator: str
    category: str
    timestamp: str

    def __post_init__(self):
        object.__setattr__(self, "proposed", tuple(self.proposed))
        object.__setattr__(self, "ranked_selection", tuple(self.ranked_selection))
        sid = self.scan_id
        if len(self.proposed) != PROPOSED_COUNT:
            raise ValueError(f"record {sid!r}: expected {PROPOSED_COUNT} proposals, got {len(self.proposed)}")
        if len(set(self.proposed)) != PROPOSED_COUNT:
            raise ValueError(f"record {sid!r}: duplicate proposed ids")
        if not 1 <= len(self.ranked_selection) <= MAX_RANKED:
            raise ValueError(
                f"record {sid!r}: ranked_selection must hold 1..{MAX_RANKED} ids, "
                f"got {len(self.ranked_selection)}"
            )
        if len(set(self.ranked_selection)) != len(self.ranked_selection):
            raise ValueError(f"record {sid!r}: duplicate ids in ranked_selection")
        if not set(self.ranked_selection) <= set(self.proposed):
            raise ValueError(f"record {sid!r}: ranked_selection not a subset of proposed")
        try:
            datetime.fromisoformat(self.timestamp.replace("Z", "+00:00"))
        except ValueError:
            raise ValueError(f"record {sid!r}: bad timestamp {self.timestamp!r}") from None

    def as_dict(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "proposed": list(self.proposed),
            "ranked_selection": list(self.ranked_selection),
            "annotator": self.annotator,
            "category": self.category,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AnnotationRecord":
        missing = [k for k in _RECORD_FIELDS if k not in payload]
        if missing:
            raise ValueError(f"annotation record missing fields {missing}")
        return cls(**{k: payload[k] for k in _RECORD_FIELDS})


def write_annotations(path, records, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.as_dict()) + "\n")


def read_annotations(path) -> list[AnnotationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path} line {lineno}: not valid JSON ({exc})") from None
            records.append(AnnotationRecord.from_dict(payload))
    return records


@dataclass(frozen=True)
class RetrievalTask:
    record: AnnotationRecord
    distractors: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "distractors", tuple(self.distractors))
        sid = self.record.scan_id
        if len(self.distractors) != DISTRACTOR_COUNT:
            raise ValueError(
                f"task {sid!r}: expected {DISTRACTOR_COUNT} distractors, got {len(self.distractors)}"
            )
        if set(self.distractors) & set(self.record.proposed):
            raise ValueError(f"task {sid!r}: distractors overlap the proposed set")

    @property
    def candidates(self) -> tuple[str, ...]:
        return self.record.proposed + self.distractors


def build_tasks(
    records: list[AnnotationRecord], cad_catalog: dict[str, str], seed: int
) -> list[RetrievalTask]:
    """Pad each record with 100 different-class distractors, deterministically.

    cad_catalog maps CAD id to category.
    """
    tasks = []
    for i, record in enumerate(records):
        eligible = sorted(
            cid
            for cid, cat in cad_catalog.items()
            if cat != record.category and cid not in record.proposed
        )
        if len(eligible) < DISTRACTOR_COUNT:
            raise ValueError(
                f"record {record.scan_id!r}: catalog has only {len(eligible)} "
                f"different-class CADs, need {DISTRACTOR_COUNT}"
            )
        rng = np.random.default_rng([seed, i])
        picks = rng.choice(len(eligible), size=DISTRACTOR_COUNT, replace=False)
        tasks.append(RetrievalTask(record, tuple(eligible[j] for j in sorted(picks))))
    return tasks


def rank_candidates(task: RetrievalTask, index: EmbeddingIndex, scan_embedding) -> list[str]:
    """All 106 candidate ids by ascending distance to the scan, ties by id."""
    dmap = index.distance_map(scan_embedding)
    ranked = []
    for cid in task.candidates:
        key = (Domain.CAD, cid)
        if key not in dmap:
            raise KeyError(f"candidate {cid!r} has no CAD embedding in the index")
        ranked.append((dmap[key], cid))
    ranked.sort()
    return [cid for _, cid in ranked]


def retrieval_accuracy(task: RetrievalTask, index: EmbeddingIndex, scan_embedding) -> int:
    """1 iff the best-ranked candidate was annotated as similar."""
    top = rank_candidates(task, index, scan_embedding)[0]
    return int(top in task.record.ranked_selection)


def ranking_quality(task: RetrievalTask, index: EmbeddingIndex, scan_embedding) -> float:
    """Fraction of the annotated ranking reproduced at the exact position."""
    annotated = task.record.ranked_selection
    n = len(annotated)
    predicted = rank_candidates(task, index, scan_embedding)[:n]
    return sum(1 for p, a in zip(predicted, annotated) if p == a) / n


def category_accuracy(
    tasks: list[RetrievalTask],
    index: EmbeddingIndex,
    scan_embeddings: dict[str, np.ndarray],
    k: int,
) -> float:
    """Mean fraction of the k best-ranked candidates sharing the query category.

    k=1 gives the top-1 hit rate; k=5 the top-5 category fraction.
    """
    if k < 1:
        raise ValueError("k must be positive")
    categories = index.categories()
    scores = []
    for task in tasks:
        ranked = rank_candidates(task, index, scan_embeddings[task.record.scan_id])[:k]
        hits = 0
        for cid in ranked:
            cat = categories.get((Domain.CAD, cid))
            if cat is None:
                raise KeyError(f"candidate {cid!r} has no category in the index")
            hits += cat == task.record.category
        scores.append(hits / k)
    return float(np.mean(scores))


# --- aggregation and reporting ---


@dataclass(frozen=True)
class ClassRow:
    mean: float
    count: int


@dataclass(frozen=True)
class AggregateResult:
    class_avg: float
    inst_avg: float
    per_class: dict[str, ClassRow] = field(default_factory=dict)


OTHER_BUCKET = "other"


def aggregate(scores, categories, *, other_threshold: int = 15) -> AggregateResult:
    """inst_avg over tasks, class_avg over per-category means.

    The per-class table pools categories with fewer than other_threshold
    tasks into one `other` row; class_avg still averages the true
    categories.
    """
    scores = [float(s) for s in scores]
    categories = list(categories)
    if len(scores) != len(categories):
        raise ValueError(f"{len(scores)} scores vs {len(categories)} categories")
    if not scores:
        raise ValueError("nothing to aggregate")
    by_cat: dict[str, list[float]] = {}
    for s, c in zip(scores, categories):
        by_cat.setdefault(c, []).append(s)
    inst_avg = float(np.mean(scores))
    class_avg = float(np.mean([np.mean(v) for v in by_cat.values()]))
    table: dict[str, ClassRow] = {}
    pooled: list[float] = []
    for cat in sorted(by_cat):
        vals = by_cat[cat]
        if len(vals) < other_threshold:
            pooled.extend(vals)
        else:
            table[cat] = ClassRow(mean=float(np.mean(vals)), count=len(vals))
    if pooled:
        table[OTHER_BUCKET] = ClassRow(mean=float(np.mean(pooled)), count=len(pooled))
    return AggregateResult(class_avg=class_avg, inst_avg=inst_avg, per_class=table)


def report_as_json(results: dict[str, AggregateResult]) -> str:
    payload = {
        name: {
            "class_avg": agg.class_avg,
            "inst_avg": agg.inst_avg,
            "per_class": {c: {"mean": row.mean, "count": row.count} for c, row in agg.per_class.items()},
        }
        for name, agg in results.items()
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def report_as_text(results: dict[str, AggregateResult]) -> str:
    """Aligned table: one row per class plus class/inst average footers."""
    metrics = list(results)
    classes: list[str] = []
    for agg in results.values():
        for c in agg.per_class:
            if c not in classes and c != OTHER_BUCKET:
                classes.append(c)
    classes.sort()
    if any(OTHER_BUCKET in agg.per_class for agg in results.values()):
        classes.append(OTHER_BUCKET)

    rows = [["class"] + metrics]
    for c in classes:
        row = [c]
        for m in metrics:
            entry = results[m].per_class.get(c)
            row.append(f"{entry.mean:.3f}" if entry else "-")
        rows.append(row)
    rows.append(["class avg"] + [f"{results[m].class_avg:.3f}" for m in metrics])
    rows.append(["inst avg"] + [f"{results[m].inst_avg:.3f}" for m in metrics])

    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
