"""Read-only HTTP matching service.

``GET /health`` and ``GET /match?q=<name>&k=<int>&rule=<top1|vote>``.
Configuration comes from ``BUNDLE_DIR`` and ``BIND_ADDR`` unless given
explicitly. The bundle is loaded once, digest-checked against its
manifest, and shared read-only by all request threads.
"""
from __future__ import annotations

import json
import logging
import os
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .matcher import RULES, BundleError, MatcherBundle, load_bundle, match_mention

log = logging.getLogger(__name__)

DEFAULT_BIND = "127.0.0.1:8080"


def parse_bind(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bind address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def match_response(bundle: MatcherBundle, query: str, k: int, rule: str) -> dict:
    t0 = time.perf_counter_ns()
    res = match_mention(bundle, query, k, rule)
    body = res.to_dict()
    files = bundle.manifest["files"] if hasattr(bundle, "manifest") else {}
    body["model_digest"] = files.get("model", {}).get("sha256")
    body["index_digest"] = files.get("index", {}).get("sha256")
    body["elapsed_us"] = (time.perf_counter_ns() - t0) // 1000
    return body


class _Handler(BaseHTTPRequestHandler):
    bundle: MatcherBundle  # set on the per-server subclass
    server_version = "sgcn"

    def _send(self, status: int, obj: dict) -> None:
        data = (json.dumps(obj, sort_keys=True) + "\n").encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):  # noqa: N802 (http.server naming)
        url = urlsplit(self.path)
        if url.path == "/health":
            return self._send(200, {"status": "ok"})
        if url.path != "/match":
            return self._send(404, {"error": "not found"})
        qs = parse_qs(url.query)
        q = qs.get("q", [""])[0]
        if not q.strip():
            return self._send(400, {"error": "missing query"})
        try:
            k = int(qs.get("k", ["10"])[0])
        except ValueError:
            return self._send(400, {"error": "k must be an integer"})
        if k < 1:
            return self._send(400, {"error": "k must be >= 1"})
        rule = qs.get("rule", ["vote"])[0]
        if rule not in RULES:
            return self._send(400, {"error": f"rule must be one of {', '.join(RULES)}"})
        return self._send(200, match_response(self.bundle, q, k, rule))

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)


def create_server(bundle_dir=None, bind: str | None = None) -> ThreadingHTTPServer:
    """Load and verify the bundle, then bind (port 0 picks a free port)."""
    bundle_dir = bundle_dir or os.environ.get("BUNDLE_DIR")
    if not bundle_dir:
        raise BundleError("no bundle directory (set BUNDLE_DIR or pass --bundle)")
    bundle = load_bundle(bundle_dir, verify=True)
    if bundle.index.size == 0:
        raise BundleError("bundle index is empty")
    handler = type("BundleHandler", (_Handler,), {"bundle": bundle})
    server = ThreadingHTTPServer(parse_bind(bind or os.environ.get("BIND_ADDR") or DEFAULT_BIND), handler)
    server.daemon_threads = True
    return server


def serve(bundle_dir=None, bind: str | None = None) -> None:
    server = create_server(bundle_dir, bind)
    host, port = server.server_address[:2]
    log.warning("serving on http://%s:%d", host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
