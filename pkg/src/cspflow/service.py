"""HTTP annotator service: the live labeling surface of a running scenario.

Serves the task-fetch/label-submit API (plus stats and health) backed by the
shared TaskPool, and the static labeling UI when a directory of assets is
provided. Accepted submissions are injected into the scheduler thread, so
human labels enter the exact aggregation path simulated labels use.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import os
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Optional
from urllib.parse import parse_qs, urlparse

from .crowd import TaskPool

log = logging.getLogger("cspflow.service")

_LABEL_PATH = re.compile(r"^/api/tasks/([^/]+)/label$")
RETRY_AFTER_MS = 1500


class AnnotatorService:
    """Owns the HTTP server; bridges the pool and the engine."""

    def __init__(self, pool: TaskPool, engine=None, annotator_pe: str = "",
                 static_dir: Optional[str] = None, bind: str = "127.0.0.1",
                 port: int = 8808):
        self.pool = pool
        self.engine = engine
        self.annotator_pe = annotator_pe
        self.static_dir = static_dir
        self.bind = bind
        self.port = port
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> "AnnotatorService":
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # noqa: N802
                log.debug("http: " + fmt, *args)

            def do_GET(self):  # noqa: N802
                service.handle_get(self)

            def do_POST(self):  # noqa: N802
                service.handle_post(self)

        self._httpd = ThreadingHTTPServer((self.bind, self.port), Handler)
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="annotator-http", daemon=True)
        self._thread.start()
        log.info("annotator service on http://%s:%d", self.bind, self.port)
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    @property
    def url(self) -> str:
        return f"http://{self.bind}:{self.port}"

    # -- request handling --------------------------------------------------------

    def handle_get(self, req: BaseHTTPRequestHandler) -> None:
        parsed = urlparse(req.path)
        if parsed.path == "/api/health":
            _reply(req, 200, {"status": "ok"})
        elif parsed.path == "/api/stats":
            _reply(req, 200, self._stats())
        elif parsed.path == "/api/tasks/next":
            query = parse_qs(parsed.query)
            worker = query.get("worker_id", [""])[0]
            if not worker:
                _reply(req, 400, {"error": "worker_id required"})
                return
            task = self.pool.next_for(worker)
            if task is None:
                req.send_response(429)
                req.send_header("Content-Type", "application/json")
                req.send_header("Retry-After", str(RETRY_AFTER_MS // 1000))
                body = json.dumps({"retry_after_ms": RETRY_AFTER_MS}).encode()
                req.send_header("Content-Length", str(len(body)))
                req.end_headers()
                req.wfile.write(body)
                return
            _reply(req, 200, {
                "task_id": task.task_id,
                "item_id": task.item_id,
                "question": task.question,
                "options": task.options,
                "priority": task.priority,
            })
        else:
            self._serve_static(req, parsed.path)

    def handle_post(self, req: BaseHTTPRequestHandler) -> None:
        match = _LABEL_PATH.match(urlparse(req.path).path)
        if not match:
            _reply(req, 404, {"error": "not found"})
            return
        task_id = match.group(1)
        try:
            length = int(req.headers.get("Content-Length", "0"))
            body = json.loads(req.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError):
            _reply(req, 400, {"error": "bad json"})
            return
        worker_id = str(body.get("worker_id", ""))
        if not worker_id or "answer" not in body:
            _reply(req, 400, {"error": "worker_id and answer required"})
            return
        now = self.engine.clock if self.engine is not None else 0.0
        status = self.pool.submit(task_id, worker_id, body["answer"],
                                  float(body.get("client_latency_ms", 0.0)),
                                  now)
        if status == "accepted":
            if self.engine is not None and self.annotator_pe:
                self.engine.inject_external(self.annotator_pe, ("submission", {
                    "task_id": task_id,
                    "worker_id": worker_id,
                    "answer": body["answer"],
                    "client_latency_ms": float(body.get("client_latency_ms",
                                                        0.0)),
                }))
            _reply(req, 200, {"status": "accepted"})
        elif status == "duplicate":
            _reply(req, 409, {"status": "duplicate"})
        elif status == "closed":
            _reply(req, 410, {"status": "closed"})
        elif status == "invalid":
            _reply(req, 400, {"status": "invalid answer"})
        else:
            _reply(req, 404, {"status": "unknown task"})

    def _stats(self) -> dict[str, Any]:
        snap = self.pool.stats_snapshot()
        if self.engine is not None:
            recorder = self.engine.recorder
            now = self.engine.clock
            window = 5000.0
            recent = [r for r in recorder.records[-4000:]
                      if r.event == "emitted" and
                      r.where in recorder.consumer_pes and
                      r.ts >= now - window]
            snap["throughput_now"] = len(recent) / (window / 1000.0)
        return snap

    def _serve_static(self, req: BaseHTTPRequestHandler, path: str) -> None:
        if self.static_dir is None:
            _reply(req, 404, {"error": "not found"})
            return
        rel = path.lstrip("/") or "index.html"
        full = os.path.realpath(os.path.join(self.static_dir, rel))
        root = os.path.realpath(self.static_dir)
        if not full.startswith(root) or not os.path.isfile(full):
            _reply(req, 404, {"error": "not found"})
            return
        ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
        with open(full, "rb") as fh:
            data = fh.read()
        req.send_response(200)
        req.send_header("Content-Type", ctype)
        req.send_header("Content-Length", str(len(data)))
        req.end_headers()
        req.wfile.write(data)


def _reply(req: BaseHTTPRequestHandler, code: int, payload: dict) -> None:
    body = json.dumps(payload).encode("utf-8")
    req.send_response(code)
    req.send_header("Content-Type", "application/json")
    req.send_header("Content-Length", str(len(body)))
    req.end_headers()
    req.wfile.write(body)
