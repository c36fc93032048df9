"""Local HTTP stub speaking the back-end wire format, for tests and benchmarks."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, List, Optional


class StubServer:
    """Answers every POST with ``{"reference": ...}`` after ``delay_s``.

    ``status`` other than 200 sends an error response; ``raw_body`` replaces
    the JSON reply verbatim (for malformed-body tests); ``responder`` maps a
    request payload to the reference text. Received payloads are kept in
    ``requests``.

    Use as a context manager::

        with StubServer("Paris is the capital of France.", delay_s=0.05) as stub:
            outcome = http_search_retrieve(stub.url, ctx)
    """

    def __init__(self, reference: str = "", delay_s: float = 0.0, status: int = 200,
                 raw_body: Optional[bytes] = None, responder: Optional[Callable[[dict], str]] = None,
                 host: str = "127.0.0.1"):
        self.reference = reference
        self.delay_s = delay_s
        self.status = status
        self.raw_body = raw_body
        self.responder = responder
        self.requests: List[dict] = []
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer((host, 0), self._handler())
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/"

    def _handler(self):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                try:
                    payload = json.loads(raw.decode("utf-8"))
                except ValueError:
                    payload = None
                with stub._lock:
                    stub.requests.append(payload)
                if stub.delay_s > 0:
                    time.sleep(stub.delay_s)
                if stub.status != 200:
                    body = json.dumps({"error": "stub failure"}).encode()
                elif stub.raw_body is not None:
                    body = stub.raw_body
                else:
                    ref = stub.responder(payload) if stub.responder else stub.reference
                    body = json.dumps({"reference": ref}).encode()
                try:
                    self.send_response(stub.status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass  # client gave up (timeout tests)

            def log_message(self, fmt, *args):
                pass

        return Handler

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
