"""Annotation task server.

Serves similarity tasks to browser annotators, collects their binary
decisions into an append-only JSON-lines log, and serves the frontend
assets plus patch images.  Category identities are never exposed in the
task payload; annotators only see slot indices.

Task assignment is round-robin over tasks that still need submissions,
with an in-flight reservation that expires after five minutes.  The log
is guarded by a single lock (one writer at a time); duplicate
(task, annotator) submissions append a new line and the loader keeps the
last one.
"""

from __future__ import annotations

import json
import threading
import time
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import InputError
from .perception import AnnotationRecord, SimilarityTask

RESERVATION_SECONDS = 300.0

_FALLBACK_PAGE = """<!doctype html>
<html><head><meta charset="utf-8"><title>annotation server</title></head>
<body><h1>Annotation server is running</h1>
<p>No UI assets were supplied; the JSON API is live at /api/task,
/api/submit and /api/stats.</p></body></html>
"""

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".json": "application/json; charset=utf-8",
    ".map": "application/json; charset=utf-8",
}


class TaskQueue:
    """Round-robin task assignment with expiring reservations."""

    def __init__(self, tasks: list[SimilarityTask], votes_per_task: int = 1):
        self.tasks = {t.task_id: t for t in tasks}
        self.order = [t.task_id for t in tasks]
        self.votes_per_task = votes_per_task
        self.submissions: dict[str, dict[str, AnnotationRecord]] = {
            t.task_id: {} for t in tasks
        }
        self.reservations: dict[str, float] = {}
        self._cursor = 0
        self._lock = threading.Lock()

    def _needs_votes(self, task_id: str) -> bool:
        return len(self.submissions[task_id]) < self.votes_per_task

    def next_task(self, now: float | None = None) -> SimilarityTask | None:
        now = time.monotonic() if now is None else now
        with self._lock:
            for _ in range(len(self.order)):
                task_id = self.order[self._cursor % len(self.order)] \
                    if self.order else None
                self._cursor += 1
                if task_id is None:
                    return None
                expiry = self.reservations.get(task_id, 0.0)
                if self._needs_votes(task_id) and expiry <= now:
                    self.reservations[task_id] = now + RESERVATION_SECONDS
                    return self.tasks[task_id]
            return None

    def record(self, rec: AnnotationRecord) -> bool:
        """Returns True when this (task, annotator) pair was new."""
        with self._lock:
            is_new = rec.annotator_id not in self.submissions[rec.task_id]
            self.submissions[rec.task_id][rec.annotator_id] = rec
            self.reservations.pop(rec.task_id, None)
            return is_new

    def stats(self) -> dict:
        with self._lock:
            completed = sum(
                1 for tid in self.order if not self._needs_votes(tid)
            )
            submissions = sum(len(v) for v in self.submissions.values())
        return {
            "tasks": len(self.order),
            "completed": completed,
            "submissions": submissions,
            "votes_per_task": self.votes_per_task,
        }


class AnnotationServer:
    def __init__(self, tasks: list[SimilarityTask], data_dir: str | Path,
                 log_path: str | Path, port: int = 0,
                 ui_dir: str | Path | None = None, votes_per_task: int = 1):
        self.queue = TaskQueue(tasks, votes_per_task=votes_per_task)
        self.data_dir = Path(data_dir)
        self.log_path = Path(log_path)
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self._log_lock = threading.Lock()
        handler = _make_handler(self)
        self.httpd = ThreadingHTTPServer(("127.0.0.1", port), handler)
        self.port = self.httpd.server_address[1]
        self._thread: threading.Thread | None = None

    def append_log(self, rec: AnnotationRecord, duplicate: bool) -> None:
        line = json.dumps({
            "task": rec.task_id,
            "annotator": rec.annotator_id,
            "decisions": list(rec.decisions),
            "order": list(rec.order),
        })
        with self._log_lock:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
        if duplicate:
            print(f"duplicate submission for {rec.task_id}/{rec.annotator_id}; "
                  f"last write wins")

    def start_background(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def _make_handler(server: AnnotationServer):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # quiet test output
            pass

        def _send_json(self, obj, status=HTTPStatus.OK):
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_bytes(self, body: bytes, ctype: str,
                        status=HTTPStatus.OK):
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path == "/api/task":
                task = server.queue.next_task()
                if task is None:
                    self.send_response(HTTPStatus.NO_CONTENT)
                    self.end_headers()
                    return
                self._send_json({
                    "task_id": task.task_id,
                    "reference_image_url": f"/images/{task.reference_patch}.png",
                    "shown": [
                        {"category_slot": slot,
                         "image_url": f"/images/{pid}.png"}
                        for slot, pid in enumerate(task.shown_patches)
                    ],
                })
                return
            if path == "/api/stats":
                self._send_json(server.queue.stats())
                return
            if path.startswith("/images/"):
                self._serve_file(server.data_dir / path.lstrip("/"))
                return
            self._serve_ui(path)

        def _serve_file(self, fs_path: Path):
            try:
                fs_path = fs_path.resolve()
                base = server.data_dir.resolve()
                if not str(fs_path).startswith(str(base)):
                    raise FileNotFoundError
                body = fs_path.read_bytes()
            except (FileNotFoundError, IsADirectoryError):
                self._send_json({"error": "not found"}, HTTPStatus.NOT_FOUND)
                return
            ctype = _CONTENT_TYPES.get(fs_path.suffix, "application/octet-stream")
            self._send_bytes(body, ctype)

        def _serve_ui(self, path: str):
            if server.ui_dir is None:
                self._send_bytes(_FALLBACK_PAGE.encode("utf-8"),
                                 "text/html; charset=utf-8")
                return
            rel = "index.html" if path in ("/", "") else path.lstrip("/")
            fs_path = (server.ui_dir / rel)
            try:
                fs_path = fs_path.resolve()
                base = server.ui_dir.resolve()
                if not str(fs_path).startswith(str(base)):
                    raise FileNotFoundError
                body = fs_path.read_bytes()
            except (FileNotFoundError, IsADirectoryError):
                self._send_json({"error": "not found"}, HTTPStatus.NOT_FOUND)
                return
            ctype = _CONTENT_TYPES.get(fs_path.suffix, "application/octet-stream")
            self._send_bytes(body, ctype)

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path != "/api/submit":
                self._send_json({"error": "not found"}, HTTPStatus.NOT_FOUND)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length) or b"{}")
                rec = self._validate(payload)
            except (ValueError, InputError) as exc:
                self._send_json({"error": str(exc)}, HTTPStatus.BAD_REQUEST)
                return
            was_new = server.queue.record(rec)
            server.append_log(rec, duplicate=not was_new)
            self._send_json({"ok": True, "duplicate": not was_new})

        def _validate(self, payload) -> AnnotationRecord:
            if not isinstance(payload, dict):
                raise InputError("submission must be a JSON object")
            for key in ("task_id", "annotator", "decisions"):
                if key not in payload:
                    raise InputError(f"missing field '{key}'")
            task = server.queue.tasks.get(payload["task_id"])
            if task is None:
                raise InputError(f"unknown task '{payload['task_id']}'")
            decisions = payload["decisions"]
            if (not isinstance(decisions, list)
                    or len(decisions) != len(task.order)
                    or any(d not in (0, 1) for d in decisions)):
                raise InputError(
                    f"decisions must be a 0/1 list of length {len(task.order)}"
                )
            annotator = str(payload["annotator"]).strip()
            if not annotator:
                raise InputError("annotator must be non-empty")
            return AnnotationRecord(
                task_id=task.task_id,
                annotator_id=annotator,
                decisions=tuple(int(d) for d in decisions),
                order=task.order,
            )

    return Handler
