"""Engine configuration, loaded from JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from actordb.control_plane import PromotionPolicy, SloTarget
from actordb.errors import InvalidArgument
from actordb.event_store import RetentionPolicy


@dataclass
class EngineConfig:
    storage: str = "memory"  # "memory" | "file"
    storage_path: Optional[str] = None
    fsync: bool = False
    polling_interval_ms: int = 10
    revocation_poll_interval_s: float = 5.0
    snapshot_keep_last_n: int = 2
    snapshot_min_events: int = 1000
    slo_targets: list = field(default_factory=list)  # [{"projection", "on_demand_p99_ms", "materialized_p99_ms"}]
    promotion: dict = field(default_factory=dict)  # PromotionPolicy fields
    control_tick_ms: int = 1000
    dag_manifest: Optional[str] = None
    projections: list = field(default_factory=list)  # definition documents
    projections_path: Optional[str] = None
    security_state: str = "actordb-security.json"
    audit_path: Optional[str] = None
    listen: str = "127.0.0.1:7420"
    subscription_capacity: int = 1024
    # None leaves the interpreter default alone
    gc_threshold: Optional[list] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.storage not in ("memory", "file"):
            raise InvalidArgument(f"storage must be memory or file, not {self.storage!r}")
        if self.storage == "file" and not self.storage_path:
            raise InvalidArgument("file storage needs storage_path")
        for name in ("polling_interval_ms", "revocation_poll_interval_s", "control_tick_ms", "subscription_capacity"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        self.retention()
        self.promotion_policy()
        self.slo()
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise InvalidArgument(f"listen must be host:port, got {self.listen!r}")
        if self.gc_threshold is not None and len(self.gc_threshold) not in (1, 2, 3):
            raise InvalidArgument("gc_threshold takes one to three integers")

    def retention(self) -> RetentionPolicy:
        return RetentionPolicy(self.snapshot_keep_last_n, self.snapshot_min_events)

    def promotion_policy(self) -> PromotionPolicy:
        try:
            return PromotionPolicy(**self.promotion)
        except TypeError as exc:
            raise InvalidArgument(f"bad promotion policy: {exc}") from None

    def slo(self) -> dict[str, SloTarget]:
        try:
            targets = [SloTarget(**t) for t in self.slo_targets]
        except TypeError as exc:
            raise InvalidArgument(f"bad SLO target: {exc}") from None
        return {t.projection: t for t in targets}

    def address(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host, int(port)

    def projection_documents(self) -> list:
        docs = list(self.projections)
        if self.projections_path:
            loaded = json.loads(Path(self.projections_path).read_text())
            docs.extend(loaded.get("projections", loaded) if isinstance(loaded, dict) else loaded)
        return docs

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict[str, Any], base_dir: Optional[Path] = None) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidArgument(f"unknown config keys: {', '.join(unknown)}")
        doc = dict(doc)
        if base_dir is not None:
            # relative paths are relative to the config file
            for key in ("storage_path", "dag_manifest", "projections_path", "security_state", "audit_path"):
                if doc.get(key) and not Path(doc[key]).is_absolute():
                    doc[key] = str(base_dir / doc[key])
        return cls(**doc)

    @classmethod
    def load(cls, path: Optional[str]) -> "EngineConfig":
        if path is None:
            return cls()
        p = Path(path)
        return cls.from_json(json.loads(p.read_text()), p.parent)
