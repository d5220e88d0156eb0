"""In-process HTTP stand-in for the teacher service.

Serves the provider wire contract (POST /augment, GET /health) from a
daemon thread. Answers come from a fixed id->aug_text mapping when one
is given, otherwise from the synthetic knowledge base oracle. Failure
and malformed-output behavior is scriptable per sample id so client
error paths can be exercised deterministically.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import knowledge_format as kf
from .dataset import KnowledgeBase, build_oracle_augmentation

# parses only after repair: one dangling mention at the end
REPAIRABLE_SUFFIX = " trailing ⟨dangler"
# a flood of stray delimiters, beyond the repair budget
UNREPAIRABLE_SUFFIX = " " + "⟨" * 40


@dataclass
class MockTeacherConfig:
    kb: KnowledgeBase | None = None
    mapping: dict[str, str] | None = None
    fail_rate: float = 0.0  # deterministic per-id failure fraction
    fail_ids: frozenset = frozenset()
    malform_ids: frozenset = frozenset()  # always emit repairable junk
    flaky_malform_ids: frozenset = frozenset()  # unrepairable once, then clean

    def __post_init__(self):
        if self.kb is None and self.mapping is None:
            raise ValueError("mock teacher needs a knowledge base or a mapping")
        if not 0.0 <= self.fail_rate <= 1.0:
            raise ValueError("fail_rate must be in [0,1]")


def _hash_fails(sample_id: str, rate: float) -> bool:
    if rate <= 0.0:
        return False
    bucket = int(hashlib.md5(sample_id.encode("utf-8")).hexdigest(), 16) % 1000
    return bucket < int(round(rate * 1000))


class MockTeacherServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, config: MockTeacherConfig, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.config = config
        self.counts_lock = threading.Lock()
        self.request_counts: dict[str, int] = {}

    @property
    def base_url(self) -> str:
        return f"http://{self.server_address[0]}:{self.server_address[1]}"

    def bump(self, sample_id: str) -> int:
        with self.counts_lock:
            self.request_counts[sample_id] = self.request_counts.get(sample_id, 0) + 1
            return self.request_counts[sample_id]

    def answer(self, sample_id: str, text: str, max_items: int):
        """(status, payload) for one augment call."""
        cfg = self.config
        seen = self.bump(sample_id)
        if sample_id in cfg.fail_ids or _hash_fails(sample_id, cfg.fail_rate):
            return 500, {"error": f"scripted failure for {sample_id}"}
        if cfg.mapping is not None:
            if sample_id not in cfg.mapping:
                return 404, {"error": f"no mapping for {sample_id}"}
            aug = cfg.mapping[sample_id]
        else:
            t = kf.truncate_to_n(build_oracle_augmentation(text, cfg.kb), max_items)
            aug = kf.serialize(t)
        if sample_id in cfg.malform_ids:
            aug += REPAIRABLE_SUFFIX
        if sample_id in cfg.flaky_malform_ids and seen == 1:
            aug += UNREPAIRABLE_SUFFIX
        return 200, {"aug_text": aug}


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):  # keep test output quiet
        pass

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/health":
            self._send(200, {"ok": True})
        else:
            self._send(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):
        if self.path != "/augment":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length).decode("utf-8"))
            sample_id = body["id"]
            text = body["text"]
            max_items = int(body["max_items"])
            if max_items < 0:
                raise ValueError("max_items must be non-negative")
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            self._send(400, {"error": f"bad request: {exc}"})
            return
        status, payload = self.server.answer(sample_id, text, max_items)
        self._send(status, payload)


def start_mock_teacher(config: MockTeacherConfig, host: str = "127.0.0.1",
                       port: int = 0) -> MockTeacherServer:
    """Start the server on a daemon thread; caller owns shutdown()."""
    server = MockTeacherServer(config, host=host, port=port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
