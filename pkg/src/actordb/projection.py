"""Keyed read models maintained incrementally over the global event feed.

A projection folds events of selected types into one row per key. Columns are
reducers: ``last`` (overwrite), ``count``, ``sum``, ``min``, ``max`` or a
registered ``custom`` fold. Late events are classified against a watermark::

    watermark = max(effective event time seen) - allowed_lateness_ms

    t >= watermark                          -> applied
    watermark - t <= correction_window_ms   -> corrected (row updated in place)
    otherwise                               -> dead-lettered

Dispositions depend only on feed order, so a rebuild reproduces the live
state exactly, dead letters included.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Optional, Union

from actordb.canonical import canonical_json, to_ms
from actordb.errors import ActorDBError, DuplicateName, InvalidDefinition, UnknownProjection
from actordb.event_store import EventRecord, EventStore
from actordb.scheduler import Priority, TaskScheduler
from actordb.sql import Expression, compile_predicate, key_lookup, parse_expression

ACTOR_KEY = "$actor_id"
REDUCERS = ("last", "count", "sum", "min", "max", "custom")

_custom_folds: dict[str, Callable[[Any, EventRecord], Any]] = {}


def register_fold(name: str, fn: Callable[[Any, EventRecord], Any]) -> None:
    """Register ``fn(previous_value, record) -> new_value`` for ``custom`` columns."""
    _custom_folds[name] = fn


class Mode(str, Enum):
    ON_DEMAND = "on_demand"
    MATERIALIZED = "materialized"


class Disposition(str, Enum):
    APPLIED = "applied"
    CORRECTED = "corrected"
    DEAD_LETTERED = "dead_lettered"


class LateEventOutcome(NamedTuple):
    disposition: Disposition
    lateness_ms: int


class DeadLetter(NamedTuple):
    global_offset: int
    actor_id: str
    event_type: str
    event_time: Optional[int]
    lateness_ms: int
    watermark_ms: int
    reason: str

    def to_json(self) -> dict:
        return self._asdict()


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    field: Optional[str] = None
    fn: Optional[str] = None

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.field is not None:
            out["field"] = self.field
        if self.fn is not None:
            out["fn"] = self.fn
        return out


def Last(name, field=None):
    return ColumnSpec(name, "last", field or name)


def Count(name="count"):
    return ColumnSpec(name, "count")


def Sum(name, field=None):
    return ColumnSpec(name, "sum", field or name)


def Min(name, field=None):
    return ColumnSpec(name, "min", field or name)


def Max(name, field=None):
    return ColumnSpec(name, "max", field or name)


@dataclass(frozen=True)
class ProjectionDefinition:
    name: str
    source_event_types: frozenset
    key_expr: str
    columns: tuple
    event_time_field: Optional[str] = None
    allowed_lateness_ms: int = 5000
    correction_window_ms: int = 60000
    mode: Mode = Mode.ON_DEMAND

    def __post_init__(self):
        object.__setattr__(self, "source_event_types", frozenset(self.source_event_types))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "mode", Mode(self.mode))
        self.validate()

    @property
    def key_column(self) -> str:
        return "actor_id" if self.key_expr == ACTOR_KEY else self.key_expr

    def column_names(self) -> list[str]:
        return [self.key_column] + [c.name for c in self.columns]

    def validate(self) -> None:
        if not self.name or not isinstance(self.name, str) or not self.name.isidentifier():
            raise InvalidDefinition(f"bad projection name {self.name!r}")
        if not self.source_event_types or not all(isinstance(t, str) and t for t in self.source_event_types):
            raise InvalidDefinition("source_event_types must be a non-empty set of strings")
        if not self.key_expr or not isinstance(self.key_expr, str):
            raise InvalidDefinition("key_expr is required")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names) or self.key_column in names:
            raise InvalidDefinition("column names must be unique and differ from the key column")
        for c in self.columns:
            if not isinstance(c, ColumnSpec) or not c.name:
                raise InvalidDefinition(f"bad column {c!r}")
            if c.kind not in REDUCERS:
                raise InvalidDefinition(f"unknown reducer {c.kind!r}")
            if c.kind in ("last", "sum", "min", "max") and not c.field:
                raise InvalidDefinition(f"column {c.name!r} needs a field")
            if c.kind == "custom" and c.fn not in _custom_folds:
                raise InvalidDefinition(f"column {c.name!r}: unregistered fold {c.fn!r}")
        for v in (self.allowed_lateness_ms, self.correction_window_ms):
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise InvalidDefinition("lateness parameters must be non-negative integers")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "source_event_types": sorted(self.source_event_types),
            "key_expr": self.key_expr,
            "columns": [c.to_json() for c in self.columns],
            "event_time_field": self.event_time_field,
            "allowed_lateness_ms": self.allowed_lateness_ms,
            "correction_window_ms": self.correction_window_ms,
            "mode": self.mode.value,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "ProjectionDefinition":
        try:
            columns = [ColumnSpec(c["name"], c["kind"], c.get("field"), c.get("fn")) for c in doc.get("columns", [])]
            for i, c in enumerate(columns):
                if c.kind in ("last", "sum", "min", "max") and c.field is None:
                    columns[i] = ColumnSpec(c.name, c.kind, c.name)
            return cls(
                name=doc["name"],
                source_event_types=frozenset(doc["source_event_types"]),
                key_expr=doc["key_expr"],
                columns=tuple(columns),
                event_time_field=doc.get("event_time_field"),
                allowed_lateness_ms=doc.get("allowed_lateness_ms", 5000),
                correction_window_ms=doc.get("correction_window_ms", 60000),
                mode=doc.get("mode", Mode.ON_DEMAND.value),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidDefinition(f"bad projection definition: {exc}") from None


def load_definitions(doc: Union[Mapping, list]) -> list[ProjectionDefinition]:
    """Accept one definition, a list, or ``{"projections": [...]}``."""
    if isinstance(doc, Mapping) and "projections" in doc:
        doc = doc["projections"]
    if isinstance(doc, Mapping):
        doc = [doc]
    return [ProjectionDefinition.from_json(d) for d in doc]


# ---------------------------------------------------------------------------
# State and the fold
# ---------------------------------------------------------------------------


class ViewState:
    """Rows plus the scratch needed to maintain them incrementally.

    Rows are replaced, never mutated, so readers may hold a row reference
    while the writer moves on. ``multisets[(key, column)]`` holds value
    counts for min/max columns.
    """

    __slots__ = (
        "rows", "multisets", "applied_offset", "watermark_ms", "max_event_time",
        "version", "row_versions", "dead_letters", "corrections", "emit",
    )

    def __init__(self):
        self.rows: dict[Any, dict] = {}
        self.multisets: dict[tuple, dict] = {}
        self.applied_offset = 0
        self.watermark_ms = 0
        self.max_event_time: Optional[int] = None
        self.version = 0
        self.row_versions: dict[Any, int] = {}
        self.dead_letters: list[DeadLetter] = []
        self.corrections = 0
        # (key, change, row, version) -> None; None for transient states
        self.emit: Optional[Callable] = None

    def canonical(self) -> str:
        def k(key):
            return canonical_json(key)

        return canonical_json(
            {
                "applied_offset": self.applied_offset,
                "watermark_ms": self.watermark_ms,
                "max_event_time": self.max_event_time,
                "version": self.version,
                "rows": sorted([k(key), row] for key, row in self.rows.items()),
                "row_versions": sorted([k(key), v] for key, v in self.row_versions.items()),
                "multisets": sorted(
                    [k(key), col, sorted([v, n] for v, n in ms.items())] for (key, col), ms in self.multisets.items()
                ),
                "dead_letters": [d.to_json() for d in self.dead_letters],
                "corrections": self.corrections,
            }
        )


def _is_number(v) -> bool:
    t = type(v)
    return t is int or t is float


def effective_time(defn: ProjectionDefinition, record: EventRecord) -> Optional[int]:
    if defn.event_time_field is None:
        return record.event_time
    raw = record.payload.get(defn.event_time_field)
    try:
        return to_ms(raw)
    except (ValueError, TypeError):
        return None


def _dead_letter(state: ViewState, record: EventRecord, t, lateness: int, reason: str) -> LateEventOutcome:
    dl = DeadLetter(record.global_offset, record.actor_id, record.event_type, t, lateness, state.watermark_ms, reason)
    state.dead_letters.append(dl)
    if state.emit is not None:
        state.emit(None, "dead_letter", dl, state.version)
    return LateEventOutcome(Disposition.DEAD_LETTERED, lateness)


def apply_event(state: ViewState, defn: ProjectionDefinition, record: EventRecord, cutoff: Optional[int] = None) -> LateEventOutcome:
    """Fold one (caller-filtered) record into ``state``.

    ``cutoff`` is used by temporal replay: dispositions and the watermark
    evolve over the whole feed, but rows only take events with effective
    time <= cutoff.
    """
    t = effective_time(defn, record)
    wm = state.watermark_ms
    if t is None:
        return _dead_letter(state, record, None, 0, "bad event time")
    if t >= wm:
        disposition = Disposition.APPLIED
        lateness = 0
    else:
        lateness = wm - t
        if lateness > defn.correction_window_ms:
            return _dead_letter(state, record, t, lateness, "beyond correction window")
        disposition = Disposition.CORRECTED

    mx = state.max_event_time
    if mx is None or t > mx:
        state.max_event_time = t
        new_wm = t - defn.allowed_lateness_ms
        if new_wm > wm:
            state.watermark_ms = new_wm

    key = record.actor_id if defn.key_expr == ACTOR_KEY else record.payload.get(defn.key_expr)
    if key is None or isinstance(key, (float, bool)):
        return _dead_letter(state, record, t, lateness, "missing or unusable key")
    if cutoff is not None and t > cutoff:
        return LateEventOutcome(disposition, lateness)

    payload = record.payload
    old = state.rows.get(key)
    row = dict(old) if old is not None else None
    ms_updates = None
    for col in defn.columns:
        kind = col.kind
        if kind == "count":
            if row is None:
                row = _new_row(defn, key)
            row[col.name] += 1
            continue
        if kind == "custom":
            if row is None:
                row = _new_row(defn, key)
            try:
                row[col.name] = _custom_folds[col.fn](row[col.name], record)
            except Exception as exc:  # noqa: BLE001 - user fold failures are dead-lettered
                return _dead_letter(state, record, t, lateness, f"custom fold {col.fn!r} failed: {exc}")
            continue
        if col.field not in payload:
            continue
        v = payload[col.field]
        if kind == "last":
            if row is None:
                row = _new_row(defn, key)
            row[col.name] = v
            continue
        if not _is_number(v):
            return _dead_letter(state, record, t, lateness, f"non-numeric value for {kind}({col.field})")
        if row is None:
            row = _new_row(defn, key)
        if kind == "sum":
            row[col.name] += v
        else:
            if ms_updates is None:
                ms_updates = []
            ms_updates.append((col, v))
    if row is None:
        # nothing to change (every column field absent)
        return LateEventOutcome(disposition, lateness)
    if ms_updates:
        for col, v in ms_updates:
            mkey = (key, col.name)
            ms = state.multisets.get(mkey)
            if ms is None:
                ms = state.multisets[mkey] = {}
            ms[v] = ms.get(v, 0) + 1
            cur = row[col.name]
            if cur is None or (v < cur if col.kind == "min" else v > cur):
                row[col.name] = v
    state.rows[key] = row
    state.version += 1
    state.row_versions[key] = state.version
    if disposition is Disposition.CORRECTED:
        state.corrections += 1
    if state.emit is not None:
        change = "correction" if disposition is Disposition.CORRECTED else ("insert" if old is None else "update")
        state.emit(key, change, row, state.version)
    return LateEventOutcome(disposition, lateness)


def _new_row(defn: ProjectionDefinition, key) -> dict:
    row = {defn.key_column: key}
    for col in defn.columns:
        row[col.name] = 0 if col.kind in ("count", "sum") else None
    return row


def fold_records(state: ViewState, defn: ProjectionDefinition, records: Iterable[EventRecord], cutoff: Optional[int] = None) -> int:
    """Apply matching records in order; advances ``applied_offset`` past all of them."""
    types = defn.source_event_types
    last = state.applied_offset
    for r in records:
        if r.event_type in types:
            apply_event(state, defn, r, cutoff)
        last = r.global_offset
    state.applied_offset = last
    return last


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class Busy(ActorDBError):
    code = "Busy"


@dataclass
class CatchUpResult:
    events_applied: int
    new_applied_offset: int


@dataclass
class RebuildResult:
    rows: int
    duration: float


@dataclass
class _View:
    defn: ProjectionDefinition
    state: ViewState
    mode: Mode
    lock: threading.RLock = field(default_factory=threading.RLock)
    listeners: list = field(default_factory=list)
    rebuilding: bool = False


class ProjectionEngine:
    """Owns projections over one :class:`EventStore`.

    ``audit`` (optional) receives ``emit(principal_id, action, resource,
    decision, reason)`` calls for dead letters.
    """

    def __init__(
        self,
        store: EventStore,
        scheduler: Optional[TaskScheduler] = None,
        audit=None,
        poll_interval_ms: int = 10,
        batch_size: int = 1000,
        rebuild_chunk: int = 20_000,
    ):
        self.store = store
        self.scheduler = scheduler or TaskScheduler()
        self.audit = audit
        self.poll_interval_ms = poll_interval_ms
        self.batch_size = batch_size
        self.rebuild_chunk = rebuild_chunk
        self._views: dict[str, _View] = {}
        self._lock = threading.Lock()
        self._poller: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self.paused = False

    # -- registry ------------------------------------------------------------

    def register_projection(self, defn: ProjectionDefinition) -> None:
        if not isinstance(defn, ProjectionDefinition):
            raise InvalidDefinition("expected a ProjectionDefinition")
        defn.validate()
        with self._lock:
            if defn.name in self._views:
                raise DuplicateName(f"projection {defn.name!r} already registered")
            view = _View(defn, ViewState(), defn.mode)
            self._attach(view, view.state)
            self._views[defn.name] = view

    def _attach(self, view: _View, state: ViewState) -> None:
        name = view.defn.name

        def emit(key, change, row, version):
            if change == "dead_letter":
                if self.audit is not None:
                    self.audit.emit("system", "dead_letter", name, "n/a", f"offset {row.global_offset}: {row.reason}")
                return
            for fn in list(view.listeners):
                fn(name, key, change, row, version)

        state.emit = emit

    def _view(self, name: str) -> _View:
        view = self._views.get(name)
        if view is None:
            raise UnknownProjection(f"unknown projection {name!r}")
        return view

    def names(self) -> list[str]:
        return sorted(self._views)

    def definition(self, name: str) -> ProjectionDefinition:
        return self._view(name).defn

    def state(self, name: str) -> ViewState:
        return self._view(name).state

    def mode(self, name: str) -> Mode:
        return self._view(name).mode

    def is_busy(self, name: str) -> bool:
        return self._view(name).rebuilding

    def dead_letters(self, name: str) -> list[DeadLetter]:
        return list(self._view(name).state.dead_letters)

    def export_dead_letters(self, name: str) -> str:
        return "".join(json.dumps(d.to_json(), sort_keys=True) + "\n" for d in self.dead_letters(name))

    def watermark(self, name: str) -> int:
        return self._view(name).state.watermark_ms

    def lag(self, name: str) -> int:
        return self.store.max_global_offset() - self._view(name).state.applied_offset

    def add_listener(self, name: str, fn: Callable) -> Callable[[], None]:
        """``fn(projection, key, change, row, version)``; returns an unsubscribe callable."""
        view = self._view(name)
        with view.lock:
            view.listeners.append(fn)

        def remove():
            with view.lock:
                if fn in view.listeners:
                    view.listeners.remove(fn)

        return remove

    # -- maintenance ---------------------------------------------------------

    def _catch_up_now(self, view: _View, max_batch: Optional[int]) -> CatchUpResult:
        with view.lock:
            state = view.state
            applied = 0
            remaining = max_batch
            types = view.defn.source_event_types
            while remaining is None or remaining > 0:
                n = self.batch_size if remaining is None else min(self.batch_size, remaining)
                batch = self.store.read_global(state.applied_offset + 1, n)
                if not batch:
                    break
                applied += sum(1 for r in batch if r.event_type in types)
                fold_records(state, view.defn, batch)
                if remaining is not None:
                    remaining -= len(batch)
                if len(batch) < n:
                    break
            return CatchUpResult(applied, state.applied_offset)

    def catch_up(self, name: str, max_batch: Optional[int] = None, priority: Priority = Priority.BATCH) -> CatchUpResult:
        view = self._view(name)

        def steps():
            return self._catch_up_now(view, max_batch)
            yield  # pragma: no cover - makes this a generator

        return self.scheduler.run(name, priority, "catch_up", steps())

    def rebuild(self, name: str) -> RebuildResult:
        """Refold the whole feed as a batch task, then swap states atomically."""
        view = self._view(name)

        def steps():
            t0 = time.perf_counter()
            view.rebuilding = True
            try:
                fresh = ViewState()
                defn = view.defn
                while True:
                    batch = self.store.read_global(fresh.applied_offset + 1, self.rebuild_chunk)
                    if not batch:
                        break
                    fold_records(fresh, defn, batch)
                    yield
                with view.lock:
                    # writes may have landed since the last chunk
                    while True:
                        batch = self.store.read_global(fresh.applied_offset + 1, self.rebuild_chunk)
                        if not batch:
                            break
                        fold_records(fresh, defn, batch)
                    self._attach(view, fresh)
                    view.state = fresh
            finally:
                view.rebuilding = False
            return RebuildResult(len(fresh.rows), time.perf_counter() - t0)

        return self.scheduler.run(name, Priority.BATCH, "rebuild", steps())

    def set_mode(self, name: str, mode: Union[Mode, str], priority: Priority = Priority.BATCH) -> Mode:
        view = self._view(name)
        mode = Mode(mode)
        previous = view.mode
        if mode == previous:
            return previous
        if view.rebuilding:
            raise Busy(f"projection {name!r} is rebuilding")
        if mode == Mode.MATERIALIZED:
            self.catch_up(name, priority=priority)
        view.mode = mode
        return previous

    # -- reads ---------------------------------------------------------------

    def query_rows(
        self,
        name: str,
        predicate: Union[Expression, str, None] = None,
        as_of: Optional[int] = None,
        principal=None,
    ) -> list[dict]:
        view = self._view(name)
        if isinstance(predicate, str):
            predicate = parse_expression(predicate)
        key_col = view.defn.key_column
        if as_of is not None:
            state = self.replay(name, as_of)
        else:
            if view.mode == Mode.ON_DEMAND:
                self.catch_up(name, priority=Priority.INTERACTIVE)
            state = view.state
        test = compile_predicate(predicate, principal)
        found, key = key_lookup(predicate, key_col)
        if found:
            row = state.rows.get(key)
            return [dict(row)] if row is not None and test(row) else []
        with view.lock:
            rows = list(state.rows.values())
        return [dict(r) for r in rows if test(r)]

    def replay(self, name: str, as_of: int) -> ViewState:
        """Transient state holding events with effective time <= ``as_of``."""
        view = self._view(name)
        state = ViewState()
        head = self.store.max_global_offset()
        while state.applied_offset < head:
            batch = self.store.read_global(state.applied_offset + 1, self.rebuild_chunk)
            if not batch:
                break
            fold_records(state, view.defn, batch, cutoff=as_of)
        return state

    # -- background polling --------------------------------------------------

    def poll_once(self) -> int:
        applied = 0
        for name, view in list(self._views.items()):
            if view.mode == Mode.MATERIALIZED or view.listeners:
                if view.state.applied_offset < self.store.max_global_offset():
                    applied += self.catch_up(name).events_applied
        return applied

    def start(self) -> None:
        if self._poller is not None:
            return
        self._stop.clear()

        def loop():
            interval = self.poll_interval_ms / 1000.0
            while not self._stop.wait(interval):
                if not self.paused:
                    self.poll_once()

        self._poller = threading.Thread(target=loop, name="actordb-poller", daemon=True)
        self._poller.start()

    def stop(self) -> None:
        if self._poller is None:
            return
        self._stop.set()
        self._poller.join()
        self._poller = None
