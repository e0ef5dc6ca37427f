"""Component wiring.

Components start in the topological order of a process manifest and stop in
reverse. The built-in manifest is::

    event_store <- projection_engine <- query_interface <- control_plane
    security_layer <- query_interface

A user manifest may add nodes, but must contain these five.
"""

from __future__ import annotations

import gc
import json
import logging
import os
import threading
from pathlib import Path
from typing import Callable, Optional

from actordb import dag
from actordb.config import EngineConfig
from actordb.control_plane import ControlPlane
from actordb.errors import ActorDBError, DuplicateCommand, InvalidArgument
from actordb.event_store import EventRecord, EventStore, FileLogBackend, MemoryBackend
from actordb.projection import ProjectionEngine, load_definitions
from actordb.query import QueryInterface, Subscription
from actordb.security import AuditLog, SecurityLayer, SignedCommand

log = logging.getLogger(__name__)

COMPONENTS = ("event_store", "projection_engine", "security_layer", "query_interface", "control_plane")

BUILTIN_MANIFEST = {
    "nodes": [
        {"name": "event_store", "depends_on": [], "config": {}},
        {"name": "projection_engine", "depends_on": ["event_store"], "config": {}},
        {"name": "security_layer", "depends_on": [], "config": {}},
        {"name": "query_interface", "depends_on": ["projection_engine", "security_layer"], "config": {}},
        {"name": "control_plane", "depends_on": ["query_interface"], "config": {}},
    ]
}


def load_security(config: EngineConfig, audit: Optional[AuditLog] = None, clock=None) -> SecurityLayer:
    """Security state lives in one JSON file; a missing file means a fresh authority."""
    kwargs = {"revocation_poll_interval_ms": int(config.revocation_poll_interval_s * 1000)}
    if clock is not None:
        kwargs["clock"] = clock
    path = Path(config.security_state)
    if path.exists():
        return SecurityLayer.from_json(json.loads(path.read_text()), audit, **kwargs)
    return SecurityLayer(audit=audit, **kwargs)


def save_security(config: EngineConfig, security: SecurityLayer) -> None:
    path = Path(config.security_state)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(security.to_json(), indent=2, sort_keys=True))
    tmp.replace(path)


class Engine:
    def __init__(
        self,
        config: Optional[EngineConfig] = None,
        security: Optional[SecurityLayer] = None,
        actor_fold: Optional[Callable[[dict, EventRecord], dict]] = None,
    ):
        """``actor_fold`` is the aggregate reducer; when given, actors are
        snapshotted every ``snapshot_min_events`` committed events."""
        self.config = config or EngineConfig()
        self.actor_fold = actor_fold
        manifest_doc = BUILTIN_MANIFEST
        if self.config.dag_manifest:
            manifest_doc = json.loads(Path(self.config.dag_manifest).read_text())
        self.manifest = dag.load(manifest_doc)
        missing = [c for c in COMPONENTS if c not in self.manifest.nodes]
        if missing:
            raise InvalidArgument(f"process manifest lacks {', '.join(missing)}")
        self.order = [n for n in dag.topo_order(self.manifest) if n in COMPONENTS]
        self.audit = AuditLog(self.config.audit_path)
        self._given_security = security
        self.started: list[str] = []
        self._tick_stop = threading.Event()
        self._ticker: Optional[threading.Thread] = None
        self._gc_saved = None
        for name in self.order:
            getattr(self, f"_build_{name}")()

    # -- construction, one method per manifest node -----------------------------

    def _build_event_store(self):
        cfg = self.config
        backend = FileLogBackend(cfg.storage_path, fsync=cfg.fsync) if cfg.storage == "file" else MemoryBackend()
        self.store = EventStore(backend)
        self.retention = cfg.retention()

    def _build_projection_engine(self):
        self.projections = ProjectionEngine(self.store, audit=self.audit, poll_interval_ms=self.config.polling_interval_ms)
        for defn in load_definitions(self.config.projection_documents()):
            self.projections.register_projection(defn)

    def _build_security_layer(self):
        self._state_stamp = None
        self._state_stop = threading.Event()
        self._state_watcher: Optional[threading.Thread] = None
        if self._given_security is not None:
            self.security = self._given_security
            self.security.audit = self.audit
        else:
            self._state_stamp = self._stamp()
            self.security = load_security(self.config, self.audit)

    def _build_query_interface(self):
        self.query_interface = QueryInterface(
            self.projections, self.security, subscription_capacity=self.config.subscription_capacity
        )

    def _build_control_plane(self):
        self.control = ControlPlane(self.projections, self.audit, self.config.promotion_policy(), self.config.slo())
        for name in self.projections.names():
            self.control.track(name, self.projections.mode(name))
        self.query_interface.control = self.control

    # -- lifecycle -------------------------------------------------------------------

    def start(self) -> None:
        if self.config.gc_threshold is not None:
            self._gc_saved = gc.get_threshold()
            gc.set_threshold(*self.config.gc_threshold)
        for name in self.order:
            starter = getattr(self, f"_start_{name}", None)
            if starter is not None:
                starter()
            self.started.append(name)

    def stop(self) -> None:
        for name in reversed(self.started):
            stopper = getattr(self, f"_stop_{name}", None)
            if stopper is not None:
                stopper()
        self.started = []
        if self._gc_saved is not None:
            gc.set_threshold(*self._gc_saved)
            self._gc_saved = None

    def close(self) -> None:
        self.stop()
        self.store.close()
        self.audit.close()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()

    def _stamp(self):
        try:
            st = os.stat(self.config.security_state)
        except FileNotFoundError:
            return None
        return st.st_mtime_ns, st.st_size, st.st_ino

    def reload_security_state(self) -> bool:
        """Pick up keys, revocations, principals and policies the CLI saved since the last look."""
        stamp = self._stamp()
        if stamp is None or stamp == self._state_stamp:
            return False
        self._state_stamp = stamp
        doc = json.loads(Path(self.config.security_state).read_text())
        self.security.sync_from_json(doc)
        return True

    def _start_security_layer(self):
        if self._given_security is not None:
            return  # state is owned by the caller, not a file
        # well under the revocation poll so a CLI revoke adds at most this much delay
        interval = min(1.0, self.config.revocation_poll_interval_s)
        self._state_stop.clear()

        def loop():
            while not self._state_stop.wait(interval):
                try:
                    self.reload_security_state()
                except (OSError, ValueError, KeyError, ActorDBError) as exc:
                    # a half-written or foreign file: keep serving on current state
                    log.warning("security state reload failed: %s", exc)

        self._state_watcher = threading.Thread(target=loop, name="actordb-security-state", daemon=True)
        self._state_watcher.start()

    def _stop_security_layer(self):
        if self._state_watcher is not None:
            self._state_stop.set()
            self._state_watcher.join()
            self._state_watcher = None

    def _start_projection_engine(self):
        self.projections.start()

    def _stop_projection_engine(self):
        self.projections.stop()

    def _start_control_plane(self):
        self._tick_stop.clear()
        interval = self.config.control_tick_ms / 1000.0

        def loop():
            while not self._tick_stop.wait(interval):
                self.control.tick()

        self._ticker = threading.Thread(target=loop, name="actordb-control", daemon=True)
        self._ticker.start()

    def _stop_control_plane(self):
        if self._ticker is not None:
            self._tick_stop.set()
            self._ticker.join()
            self._ticker = None

    # -- request handling ------------------------------------------------------------

    def submit_command(self, envelope: str) -> dict:
        """Verify a signed envelope, then append its events."""
        self.security.verify_command(envelope)
        cmd = SignedCommand.decode(envelope) if isinstance(envelope, str) else envelope
        try:
            res = self.store.append(cmd.actor_id, cmd.store_events(), cmd.expected_sequence)
            duplicate = False
            if self.actor_fold is not None:
                self.store.maybe_snapshot(cmd.actor_id, self.retention, self.actor_fold)
        except DuplicateCommand as dup:
            res, duplicate = dup.result, True
        return {
            "actor_id": cmd.actor_id,
            "command_id": cmd.command_id,
            "first_sequence": res[0],
            "last_sequence": res[1],
            "last_global_offset": res[2],
            "duplicate": duplicate,
        }

    def query(self, token: str, sql: str) -> list[dict]:
        principal = self.security.verify_token(token, resource="query")
        return self.query_interface.query(sql, principal)

    def subscribe(self, token: str, sql: str) -> Subscription:
        principal = self.security.verify_token(token, resource="subscribe")
        return self.query_interface.subscribe(sql, principal)
