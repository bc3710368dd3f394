"""Thin HTTP layer over a live guard: snapshot, SSE event stream,
override submission, and joystick-style simulated verdicts.

Plain HTTP on a loopback bind by default; the event stream is
server-sent events with one JSON record per message. Unauthenticated by
design: this is a research simulator, not the production system.
"""

from __future__ import annotations

import json
import queue
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .guard import GuardRunner

STREAM_KEEPALIVE_S = 15.0


class GuardService:
    def __init__(self, runner: GuardRunner, host: str = "127.0.0.1", port: int = 0):
        self.runner = runner
        handler = _make_handler(runner)
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def start(self) -> "GuardService":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


def serve(runner: GuardRunner, bind: str = "127.0.0.1:0") -> GuardService:
    """Start serving a running guard on ``host:port`` (port 0 = ephemeral)."""
    host, _, port = bind.partition(":")
    service = GuardService(runner, host or "127.0.0.1", int(port or 0))
    return service.start()


def _make_handler(runner: GuardRunner):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # quiet by default
            pass

        def _send_json(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _read_json(self) -> dict | None:
            try:
                length = int(self.headers.get("Content-Length", "0"))
                return json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, json.JSONDecodeError):
                return None

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            if self.path == "/state":
                self._send_json(200, runner.snapshot())
            elif self.path == "/events":
                self._stream_events()
            elif self.path == "/":
                self._send_json(200, {
                    "service": "canguard",
                    "endpoints": ["/state", "/events", "/override", "/simulate"],
                })
            else:
                self._send_json(404, {"error": "not found"})

        def _stream_events(self):
            q = runner.subscribe()
            try:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                # opening snapshot so clients render current state immediately
                first = {"event": None, "state": runner.snapshot()}
                self.wfile.write(f"data: {json.dumps(first)}\n\n".encode())
                self.wfile.flush()
                while True:
                    try:
                        item = q.get(timeout=STREAM_KEEPALIVE_S)
                    except queue.Empty:
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                        continue
                    if item is None:  # guard stopped; drain and close
                        break
                    self.wfile.write(f"data: {json.dumps(item)}\n\n".encode())
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                pass
            finally:
                runner.unsubscribe(q)

        def do_POST(self):
            if self.path == "/override":
                body = self._read_json()
                code = (body or {}).get("code")
                if not isinstance(code, str) or len(code) != 8 or not code.isdigit():
                    self._send_json(400, {"error": "code must be 8 decimal digits"})
                    return
                runner.submit_override(code)
                self._send_json(202, {"status": "queued"})
            elif self.path == "/simulate":
                body = self._read_json()
                verdict = (body or {}).get("verdict")
                if verdict not in ("pass", "fail"):
                    self._send_json(400, {"error": "verdict must be 'pass' or 'fail'"})
                    return
                if not runner.config.simulated:
                    self._send_json(409, {"error": "guard is in model-driven mode"})
                    return
                runner.submit_simulated(verdict)
                self._send_json(202, {"status": "queued"})
            else:
                self._send_json(404, {"error": "not found"})

    return Handler
