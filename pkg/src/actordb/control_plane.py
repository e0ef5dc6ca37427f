"""SLO tracking and hysteresis-guarded view promotion.

Latency samples land in tumbling windows per projection. Each closed window
is judged once, in order, so the decision sequence is a pure function of the
sample trace and the policy regardless of how often :meth:`ControlPlane.evaluate`
is called.
"""

from __future__ import annotations

import json
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

from actordb.canonical import now_ms
from actordb.errors import InvalidArgument, UnknownProjection
from actordb.projection import Busy, Mode

TEMPORAL_ROUTE = "TemporalReplay"


@dataclass(frozen=True)
class SloTarget:
    projection: str
    on_demand_p99_ms: float = 200.0
    materialized_p99_ms: float = 50.0

    def __post_init__(self):
        if self.on_demand_p99_ms <= 0 or self.materialized_p99_ms <= 0:
            raise InvalidArgument("SLO targets must be positive")
        if self.materialized_p99_ms > self.on_demand_p99_ms:
            raise InvalidArgument("materialized target cannot exceed the on-demand target")


@dataclass(frozen=True)
class PromotionPolicy:
    violation_windows: int = 3  # K
    min_query_rate_hz: float = 1.0
    idle_windows: int = 30  # M
    cooldown_windows: int = 6  # C
    window_ms: int = 10_000
    min_samples: int = 20

    def __post_init__(self):
        if min(self.violation_windows, self.idle_windows, self.cooldown_windows) < 1:
            raise InvalidArgument("K, M and C must be at least 1")
        if self.window_ms <= 0 or self.min_samples < 1 or self.min_query_rate_hz < 0:
            raise InvalidArgument("bad window parameters")


@dataclass(frozen=True)
class Decision:
    projection: str
    action: str  # "promote" | "demote"
    window: int
    reason: str


def nearest_rank(sorted_samples: list, q: float):
    """Nearest-rank percentile: the ceil(q*n)-th smallest sample."""
    if not sorted_samples:
        return None
    rank = max(1, math.ceil(q * len(sorted_samples)))
    return sorted_samples[rank - 1]


@dataclass
class WindowStats:
    index: int
    samples: list = field(default_factory=list)

    def count(self) -> int:
        return len(self.samples)

    def rate_hz(self, window_ms: int) -> float:
        return len(self.samples) / (window_ms / 1000.0)

    def p99(self, min_samples: int):
        if len(self.samples) < min_samples:
            return None
        return nearest_rank(sorted(self.samples), 0.99)


class ControlPlane:
    def __init__(
        self,
        engine=None,
        audit=None,
        policy: Optional[PromotionPolicy] = None,
        targets: Optional[dict] = None,
        clock: Callable[[], int] = now_ms,
    ):
        self.engine = engine
        self.audit = audit
        self.policy = policy or PromotionPolicy()
        self.targets: dict[str, SloTarget] = dict(targets or {})
        self.clock = clock
        self._windows: dict[str, dict[int, WindowStats]] = defaultdict(dict)
        self._lock = threading.Lock()
        self._next_window: Optional[int] = None
        self._last_decision: dict[str, int] = {}
        self._assumed_mode: dict[str, Mode] = {}
        self._pending: list[Decision] = []
        self.decisions: list[Decision] = []

    def target(self, projection: str) -> SloTarget:
        t = self.targets.get(projection)
        if t is None:
            t = self.targets[projection] = SloTarget(projection)
        return t

    def track(self, projection: str, mode: Mode = Mode.ON_DEMAND) -> None:
        """Follow a projection that may not have produced samples yet (needed for demotion)."""
        self.target(projection)
        self._assumed_mode.setdefault(projection, Mode(mode))

    def window_of(self, t_ms: int) -> int:
        return t_ms // self.policy.window_ms

    def record_sample(self, projection: str, route: str, latency_ms: float, now: Optional[int] = None) -> None:
        if latency_ms < 0:
            raise InvalidArgument("latency must be non-negative")
        if route == TEMPORAL_ROUTE:
            return  # replays are slow by design; they say nothing about the live view
        w = self.window_of(self.clock() if now is None else now)
        with self._lock:
            if projection not in self.targets:
                self.track(projection)
            windows = self._windows[projection]
            stats = windows.get(w)
            if stats is None:
                stats = windows[w] = WindowStats(w)
            stats.samples.append(latency_ms)
            if self._next_window is None:
                self._next_window = w

    def _mode(self, projection: str) -> Mode:
        if self.engine is not None:
            try:
                return self.engine.mode(projection)
            except UnknownProjection:
                pass
        return self._assumed_mode.get(projection, Mode.ON_DEMAND)

    def _judge(self, projection: str, w: int) -> Optional[Decision]:
        pol = self.policy
        last = self._last_decision.get(projection)
        if last is not None and w - last < pol.cooldown_windows:
            return None
        windows = self._windows[projection]
        target = self.target(projection)

        def stats(i):
            return windows.get(i) or WindowStats(i)

        if self._mode(projection) == Mode.ON_DEMAND:
            # a promote is anchored on a fresh non-quiet window; quiet gaps are skipped
            if stats(w).count() < pol.min_samples:
                return None
            span = self._last_active(windows, w, pol.violation_windows)
            ok = len(span) == pol.violation_windows and all(
                s.p99(pol.min_samples) > target.on_demand_p99_ms and s.rate_hz(pol.window_ms) >= pol.min_query_rate_hz
                for s in span
            )
            if ok:
                worst = max(s.p99(pol.min_samples) for s in span)
                return Decision(projection, "promote", w, f"p99 above {target.on_demand_p99_ms}ms for {pol.violation_windows} windows (worst {worst:.1f}ms)")
        else:
            span = [stats(i) for i in range(w - pol.idle_windows + 1, w + 1)]
            idle = all(
                s.count() < pol.min_samples or s.rate_hz(pol.window_ms) < pol.min_query_rate_hz for s in span
            )
            if idle:
                return Decision(projection, "demote", w, f"idle for {pol.idle_windows} windows")
        return None

    def evaluate(self, now: Optional[int] = None) -> list[Decision]:
        """Judge every window closed since the last call; returns the new decisions."""
        current = self.window_of(self.clock() if now is None else now)
        out: list[Decision] = []
        with self._lock:
            if self._next_window is None:
                self._next_window = current
            for w in range(self._next_window, current):
                for projection in sorted(self.targets):
                    d = self._judge(projection, w)
                    if d is None:
                        continue
                    self._last_decision[projection] = w
                    self._assumed_mode[projection] = Mode.MATERIALIZED if d.action == "promote" else Mode.ON_DEMAND
                    out.append(d)
            self._next_window = max(self._next_window, current)
            self._prune(current)
        for d in out:
            self.decisions.append(d)
            if self.audit is not None:
                self.audit.emit("control_plane", "promotion_decision", d.projection, d.action, f"window {d.window}: {d.reason}")
        return out

    def _last_active(self, windows: dict, w: int, k: int) -> list:
        """The last k non-quiet windows at or before w, newest first."""
        out = []
        for i in sorted((i for i in windows if i <= w), reverse=True):
            if windows[i].count() >= self.policy.min_samples:
                out.append(windows[i])
                if len(out) == k:
                    break
        return out

    def _prune(self, current: int) -> None:
        keep = max(self.policy.violation_windows, self.policy.idle_windows) + 2
        for windows in self._windows.values():
            active = {s.index for s in self._last_active(windows, current, self.policy.violation_windows)}
            for i in [i for i in windows if i < current - keep and i not in active]:
                del windows[i]

    def apply(self, decisions: list[Decision]) -> list[Decision]:
        """Push decisions to the engine; busy projections are retried on the next call.

        Returns the decisions applied now.
        """
        if self.engine is None:
            return list(decisions)
        queue, self._pending = self._pending + list(decisions), []
        applied = []
        for d in queue:
            mode = Mode.MATERIALIZED if d.action == "promote" else Mode.ON_DEMAND
            try:
                self.engine.set_mode(d.projection, mode)
                applied.append(d)
            except Busy as exc:
                self._pending.append(d)
                self._audit_failure(d, f"deferred: {exc}")
            except UnknownProjection as exc:
                self._audit_failure(d, f"skipped: {exc}")
        return applied

    def _audit_failure(self, d: Decision, reason: str) -> None:
        if self.audit is not None:
            self.audit.emit("control_plane", "promotion_decision", d.projection, "n/a", reason)

    @property
    def pending(self) -> list[Decision]:
        return list(self._pending)

    def tick(self, now: Optional[int] = None) -> list[Decision]:
        return self.apply(self.evaluate(now))

    def current_p99(self, projection: str, now: Optional[int] = None):
        w = self.window_of(self.clock() if now is None else now)
        with self._lock:
            stats = self._windows.get(projection, {}).get(w)
            return stats.p99(self.policy.min_samples) if stats else None

    def health(self, now: Optional[int] = None) -> dict:
        now = self.clock() if now is None else now
        report: dict = {"projections": {}}
        names = set(self.targets)
        if self.engine is not None:
            names |= set(self.engine.names())
            report["store_max_offset"] = self.engine.store.max_global_offset()
        for name in sorted(names):
            entry = {"mode": self._mode(name).value, "current_window_p99_ms": self.current_p99(name, now)}
            if self.engine is not None and name in self.engine.names():
                entry["lag"] = self.engine.lag(name)
                entry["watermark_ms"] = self.engine.watermark(name)
                entry["dead_letters"] = len(self.engine.dead_letters(name))
            report["projections"][name] = entry
        if self.audit is not None:
            report["audit_head"] = self.audit.head
        return report

    def health_json(self, now: Optional[int] = None) -> str:
        return json.dumps(self.health(now), sort_keys=True, separators=(",", ":"))
