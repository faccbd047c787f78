"""HTTP annotation service: task leasing, ranked-selection intake, voxel API.

The service owns three pieces of state behind one lock: the lease table
(which scans are currently handed out), the per-scan annotation counts, and
the append-only JSONL record store. Task payloads themselves are pure
functions of frozen inputs: a scan's six proposals come from the
autoencoder-latent index deterministically, so re-serving a scan always
shows the same choices.

Endpoints (JSON over HTTP, CORS open):
  GET  /api/task[?annotator=NAME]  next least-annotated scan, 204 when none
  POST /api/annotation             {task_id, ranked_selection, annotator}
  GET  /api/voxels/{id}            id, "id:scan", or "id:cad"
  GET  /api/stats                  counts per category and annotator
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
import zlib
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlparse

from .benchmark import AnnotationRecord, read_annotations
from .datagen import PairedSample
from .embedspace import EmbeddingIndex, propose_candidates
from .voxel import Domain, OccupancyGrid, pack_occupancy

DEFAULT_LEASE_MINUTES = 15.0


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def grid_payload(grid: OccupancyGrid) -> dict:
    return {
        "dims": list(grid.dims),
        "occupancy": base64.b64encode(pack_occupancy(grid)).decode("ascii"),
    }


@dataclass
class _OpenTask:
    task_id: str
    scan_id: str
    proposals: tuple[str, ...]
    expires_at: float
    annotator: str | None = None
    answered: bool = False


class AnnotationService:
    """Task selection, lease bookkeeping, and annotation persistence."""

    def __init__(
        self,
        samples: list[tuple[PairedSample, str | None]],
        ae_index: EmbeddingIndex,
        annotations_path,
        *,
        seed: int = 0,
        lease_minutes: float = DEFAULT_LEASE_MINUTES,
        clock=time.monotonic,
    ):
        if not samples:
            raise ValueError("service needs at least one sample")
        self._samples: dict[str, PairedSample] = {}
        self._hints: dict[str, str | None] = {}
        for sample, hint in samples:
            sid = sample.sample_id
            if sid in self._samples:
                raise ValueError(f"duplicate sample id {sid!r}")
            self._samples[sid] = sample
            self._hints[sid] = hint
        self._ae_index = ae_index if ae_index.frozen else ae_index.freeze()
        for sid in self._samples:
            # fail at startup, not mid-session, if a latent is missing
            self._ae_index.vector_for(Domain.CAD, sid)
        self._annotations_path = annotations_path
        self._seed = seed
        self._lease_seconds = lease_minutes * 60.0
        self._clock = clock
        self._lock = threading.Lock()
        self._open: dict[str, _OpenTask] = {}
        self._serial = 0
        self._counts = {sid: 0 for sid in self._samples}
        if os.path.exists(annotations_path):
            for record in read_annotations(annotations_path):
                if record.scan_id in self._counts:
                    self._counts[record.scan_id] += 1
        self._proposal_cache: dict[str, tuple[str, ...]] = {}

    # --- task assembly ---

    def proposals_for(self, scan_id: str) -> tuple[str, ...]:
        """Deterministic six-proposal set for one scan."""
        if scan_id not in self._proposal_cache:
            task_seed = self._seed * (1 << 32) + zlib.crc32(scan_id.encode("utf-8"))
            picks = propose_candidates(self._ae_index, scan_id, task_seed)
            self._proposal_cache[scan_id] = tuple(picks)
        return self._proposal_cache[scan_id]

    def _payload(self, task: _OpenTask) -> dict:
        sample = self._samples[task.scan_id]
        proposals = []
        for cid in task.proposals:
            proposals.append({"cad_id": cid, "grid": grid_payload(self._samples[cid].cad)})
        payload = {
            "task_id": task.task_id,
            "scan": grid_payload(sample.scan),
            "proposals": proposals,
            "hint_image_url": self._hints.get(task.scan_id),
        }
        return payload

    def _purge_expired(self, now: float) -> None:
        gone = [tid for tid, t in self._open.items() if not t.answered and t.expires_at <= now]
        for tid in gone:
            del self._open[tid]

    def serve_task(self, annotator: str | None = None) -> dict | None:
        """Lease the least-annotated unleased scan; None when all are busy.

        A caller that names itself gets its own active lease back instead of
        a fresh scan, so polling is idempotent per annotator.
        """
        with self._lock:
            now = self._clock()
            self._purge_expired(now)
            if annotator:
                for task in self._open.values():
                    if task.annotator == annotator and not task.answered:
                        task.expires_at = now + self._lease_seconds
                        return self._payload(task)
            leased = {t.scan_id for t in self._open.values() if not t.answered}
            candidates = [sid for sid in self._samples if sid not in leased]
            if not candidates:
                return None
            scan_id = min(candidates, key=lambda sid: (self._counts[sid], sid))
            self._serial += 1
            task = _OpenTask(
                task_id=f"{scan_id}#{self._serial:05d}",
                scan_id=scan_id,
                proposals=self.proposals_for(scan_id),
                expires_at=now + self._lease_seconds,
                annotator=annotator,
            )
            self._open[task.task_id] = task
            return self._payload(task)

    # --- annotation intake ---

    def submit(self, task_id: str, ranked_selection, annotator: str) -> AnnotationRecord:
        if not isinstance(annotator, str) or not annotator.strip():
            raise ServiceError(400, "annotator must be a non-empty string")
        if not isinstance(ranked_selection, (list, tuple)) or not all(
            isinstance(x, str) for x in ranked_selection
        ):
            raise ServiceError(400, "ranked_selection must be a list of CAD ids")
        with self._lock:
            task = self._open.get(task_id)
            if task is None:
                raise ServiceError(404, f"unknown task_id {task_id!r}")
            if task.answered:
                raise ServiceError(409, f"task {task_id!r} was already answered")
            sample = self._samples[task.scan_id]
            try:
                record = AnnotationRecord(
                    scan_id=task.scan_id,
                    proposed=task.proposals,
                    ranked_selection=tuple(ranked_selection),
                    annotator=annotator,
                    category=sample.category,
                    timestamp=datetime.now(timezone.utc).isoformat(),
                )
            except ValueError as exc:
                raise ServiceError(400, str(exc)) from None
            # flushed single-write append under the lock: the store only
            # ever grows by whole lines
            line = json.dumps(record.as_dict()) + "\n"
            with open(self._annotations_path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            task.answered = True
            self._counts[task.scan_id] += 1
            return record

    # --- auxiliary reads ---

    def grid(self, object_id: str) -> dict | None:
        sid, _, member = object_id.partition(":")
        sample = self._samples.get(sid)
        if sample is None or member not in ("", "scan", "cad"):
            return None
        grid = sample.scan if member == "scan" else sample.cad
        return {"object_id": object_id, **grid_payload(grid)}

    def stats(self) -> dict:
        per_category: dict[str, int] = {}
        per_annotator: dict[str, int] = {}
        total = 0
        if os.path.exists(self._annotations_path):
            for record in read_annotations(self._annotations_path):
                total += 1
                per_category[record.category] = per_category.get(record.category, 0) + 1
                per_annotator[record.annotator] = per_annotator.get(record.annotator, 0) + 1
        with self._lock:
            pending = sum(1 for c in self._counts.values() if c == 0)
        return {
            "total": total,
            "per_category": per_category,
            "per_annotator": per_annotator,
            "unannotated_scans": pending,
        }


# --- HTTP layer ---


class _Handler(BaseHTTPRequestHandler):
    service: AnnotationService

    def log_message(self, *args):  # tests run quiet
        pass

    def _send(self, status: int, payload=None) -> None:
        body = b"" if payload is None else json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        if body:
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
        else:
            self.send_header("Content-Length", "0")
        self.end_headers()
        if body:
            self.wfile.write(body)

    def do_OPTIONS(self):
        self._send(204)

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/api/task":
            annotator = parse_qs(url.query).get("annotator", [None])[0]
            payload = self.service.serve_task(annotator)
            if payload is None:
                self._send(204)
            else:
                self._send(200, payload)
        elif url.path.startswith("/api/voxels/"):
            object_id = unquote(url.path[len("/api/voxels/") :])
            payload = self.service.grid(object_id)
            if payload is None:
                self._send(404, {"error": f"unknown object {object_id!r}"})
            else:
                self._send(200, payload)
        elif url.path == "/api/stats":
            self._send(200, self.service.stats())
        else:
            self._send(404, {"error": f"no such endpoint {url.path}"})

    def do_POST(self):
        url = urlparse(self.path)
        if url.path != "/api/annotation":
            self._send(404, {"error": f"no such endpoint {url.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError):
            self._send(400, {"error": "request body is not valid JSON"})
            return
        missing = [k for k in ("task_id", "ranked_selection", "annotator") if k not in payload]
        if missing:
            self._send(400, {"error": f"missing fields {missing}"})
            return
        try:
            record = self.service.submit(
                payload["task_id"], payload["ranked_selection"], payload["annotator"]
            )
        except ServiceError as exc:
            self._send(exc.status, {"error": str(exc)})
            return
        self._send(200, record.as_dict())


def make_server(service: AnnotationService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Threaded HTTP server bound to the service; port 0 picks a free port."""
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)
