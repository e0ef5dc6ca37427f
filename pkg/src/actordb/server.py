"""Newline-delimited JSON over TCP.

Requests::

    {"kind": "command", "envelope": "<h>.<b>.<s>"}
    {"kind": "query", "token": "<token>", "sql": "SELECT ..."}
    {"kind": "subscribe", "token": "<token>", "sql": "SUBSCRIBE TO ..."}
    {"kind": "health"}

Every request line gets exactly one response line ``{"ok": true, "data": ...}``
or ``{"ok": false, "error": {"code", "message"}}``. A successful subscribe
turns the connection into a stream of ``{"kind": "notification", ...}`` lines
that ends with an error line on overflow.
"""

from __future__ import annotations

import json
import socketserver
import threading
from typing import Optional

from actordb.engine import Engine
from actordb.errors import ActorDBError, InvalidArgument, NoSignature, Overflow


def _line(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str) + "\n").encode("utf-8")


def error_doc(exc: Exception) -> dict:
    if isinstance(exc, ActorDBError):
        return {"ok": False, "error": exc.to_json()}
    return {"ok": False, "error": {"code": "InternalError", "message": str(exc)}}


def handle_request(engine: Engine, req) -> dict:
    """Dispatch one non-streaming request."""
    if not isinstance(req, dict):
        raise InvalidArgument("request must be a JSON object")
    kind = req.get("kind")
    if kind == "command":
        envelope = req.get("envelope")
        if not envelope:
            raise NoSignature("commands must carry a signed envelope")
        return {"ok": True, "data": engine.submit_command(envelope)}
    if kind == "query":
        return {"ok": True, "data": {"rows": engine.query(_need(req, "token"), _need(req, "sql"))}}
    if kind == "health":
        return {"ok": True, "data": engine.control.health()}
    raise InvalidArgument(f"unknown request kind {kind!r}")


def _need(req: dict, key: str) -> str:
    value = req.get(key)
    if not isinstance(value, str) or not value:
        raise InvalidArgument(f"request needs {key!r}")
    return value


class _Handler(socketserver.StreamRequestHandler):
    server: "ActorDBServer"

    def handle(self):
        engine = self.server.engine
        for raw in self.rfile:
            if not raw.strip():
                continue
            try:
                req = json.loads(raw)
            except (ValueError, UnicodeDecodeError) as exc:
                self._send({"ok": False, "error": {"code": "MalformedRequest", "message": str(exc)}})
                continue
            if isinstance(req, dict) and req.get("kind") == "subscribe":
                self._stream(engine, req)
                return
            try:
                resp = handle_request(engine, req)
            except Exception as exc:  # noqa: BLE001 - returned in-band
                resp = error_doc(exc)
            if not self._send(resp):
                return

    def _send(self, doc) -> bool:
        try:
            self.wfile.write(_line(doc))
            self.wfile.flush()
            return True
        except OSError:
            return False

    def _stream(self, engine: Engine, req: dict) -> None:
        try:
            sub = engine.subscribe(_need(req, "token"), _need(req, "sql"))
        except Exception as exc:  # noqa: BLE001
            self._send(error_doc(exc))
            return
        try:
            if not self._send({"ok": True, "data": {"subscribed": sub.plan.statement.target}}):
                return
            while not self.server.stopping.is_set():
                try:
                    note = sub.get(timeout=0.05)
                except Overflow as exc:
                    self._send(error_doc(exc))
                    return
                if note is not None and not self._send({"kind": "notification", **note.to_json()}):
                    return
        finally:
            sub.close()


class ActorDBServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, engine: Engine, address: Optional[tuple] = None):
        self.engine = engine
        self.stopping = threading.Event()
        super().__init__(address or engine.config.address(), _Handler)

    def shutdown(self):
        self.stopping.set()
        super().shutdown()


def serve_in_thread(engine: Engine, address=("127.0.0.1", 0)) -> tuple[ActorDBServer, threading.Thread]:
    server = ActorDBServer(engine, address)
    thread = threading.Thread(target=server.serve_forever, name="actordb-server", daemon=True)
    thread.start()
    return server, thread
