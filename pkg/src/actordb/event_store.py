"""Append-only, per-actor single-writer event storage.

Each actor owns a gap-free stream of sequences starting at 1. Every committed
record also receives a store-wide ``global_offset``; the global feed is what
projections poll. The duplicate check, the sequence check and the commit run
under one store lock, so each actor sees a total order and the global feed
never has gaps. Snapshot bookkeeping uses separate per-actor striped locks.

Two backends share one contract: ``MemoryBackend`` (volatile) and
``FileLogBackend``, a single append-only file of length-prefixed records, each
followed by a CRC32 of its payload::

    b"ADB1" | u32le len | canonical JSON | u32le crc32 | u32le len | ...
"""

from __future__ import annotations

import bisect
import hashlib
import json
import os
import struct
import threading
import zlib
from array import array
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, NamedTuple, Optional

from actordb.canonical import canonical_bytes, now_ms, to_ms
from actordb.errors import DuplicateCommand, InvalidArgument, SequenceConflict, StorageCorruption

MAGIC = b"ADB1"
_U32 = struct.Struct("<I")
# skips the generated NamedTuple.__new__ on the hot path
_new_tuple = tuple.__new__
_SCALARS = (str, int, float, bool, type(None))
_SCALAR_TYPES = frozenset(_SCALARS)
_INFINITIES = (float("inf"), float("-inf"))
MAX_ACTOR_ID_BYTES = 256
LOCK_STRIPES = 256


class EventRecord(NamedTuple):
    actor_id: str
    sequence: int
    global_offset: int
    event_type: str
    event_time: int  # epoch ms, business time
    ingest_time: int  # epoch ms, store clock
    payload: dict
    command_id: str

    def to_json(self) -> dict:
        return self._asdict()

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "EventRecord":
        return cls(
            doc["actor_id"],
            doc["sequence"],
            doc["global_offset"],
            doc["event_type"],
            doc["event_time"],
            doc["ingest_time"],
            dict(doc["payload"]),
            doc["command_id"],
        )


class AppendResult(NamedTuple):
    first_sequence: int
    last_sequence: int
    last_global_offset: int


@dataclass(frozen=True)
class Snapshot:
    actor_id: str
    up_to_sequence: int
    state: dict
    created_at: int

    def to_json(self) -> dict:
        return {
            "actor_id": self.actor_id,
            "up_to_sequence": self.up_to_sequence,
            "state": self.state,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "Snapshot":
        return cls(doc["actor_id"], doc["up_to_sequence"], dict(doc["state"]), doc["created_at"])


@dataclass(frozen=True)
class RetentionPolicy:
    keep_last_n: int = 2
    min_events_between_snapshots: int = 1000

    def __post_init__(self):
        if self.keep_last_n < 1:
            raise InvalidArgument("keep_last_n must be >= 1")
        if self.min_events_between_snapshots < 1:
            raise InvalidArgument("min_events_between_snapshots must be >= 1")


def validate_payload(payload: Any) -> dict:
    if type(payload) is not dict:
        if not isinstance(payload, Mapping):
            raise InvalidArgument("payload must be a mapping")
        payload = dict(payload)
    for k, v in payload.items():
        tv = type(v)
        if tv not in _SCALAR_TYPES:
            if not isinstance(v, _SCALARS) or isinstance(v, (Mapping, list)):
                raise InvalidArgument(f"payload field {k!r} is not a scalar")
        elif tv is float and (v != v or v in _INFINITIES):
            raise InvalidArgument(f"payload field {k!r} is not finite")
        if type(k) is not str:
            raise InvalidArgument(f"payload field names must be strings, got {k!r}")
    return dict(payload)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class StorageBackend:
    """Storage contract used by :class:`EventStore`.

    ``append_batch`` receives fully formed records and must make them visible
    all at once. ``stats["examined"]`` counts records touched by reads; tests
    use it to prove the event-type index is used instead of a scan.
    """

    def append_batch(self, records: list[EventRecord]) -> None:
        raise NotImplementedError

    def read_actor(self, actor_id: str, from_sequence: int, to_sequence: Optional[int]) -> list[EventRecord]:
        raise NotImplementedError

    def read_global(self, from_offset: int, limit: int) -> list[EventRecord]:
        raise NotImplementedError

    def read_by_type(self, event_type: str, from_offset: int, limit: int) -> list[EventRecord]:
        raise NotImplementedError

    def actor_head(self, actor_id: str) -> int:
        raise NotImplementedError

    def find_command(self, actor_id: str, command_id: str) -> Optional[AppendResult]:
        raise NotImplementedError

    def max_global_offset(self) -> int:
        raise NotImplementedError

    def max_ingest_time(self) -> int:
        raise NotImplementedError

    def load_snapshots(self, actor_id: str) -> list[Snapshot]:
        raise NotImplementedError

    def store_snapshots(self, actor_id: str, snapshots: list[Snapshot]) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class MemoryBackend(StorageBackend):
    def __init__(self):
        self._log: list[EventRecord] = []
        # actor -> offset (int) for one-event actors, else array("q"); arrays
        # are not GC-tracked, which matters with millions of actors
        self._by_actor: dict[str, Any] = {}
        self._by_type: dict[str, array] = {}
        # actor -> (command_id, first, last, offset) while the actor has one
        # command, else {command_id: (first, last, offset)}
        self._commands: dict[str, Any] = {}
        self._snapshots: dict[str, list[Snapshot]] = {}
        self.stats = {"examined": 0, "read_global_calls": 0}

    def _index(self, records: list[EventRecord]) -> None:
        by_actor = self._by_actor
        by_type = self._by_type
        commands = self._commands
        for r in records:
            aid = r.actor_id
            off = r.global_offset
            stream = by_actor.get(aid)
            if stream is None:
                by_actor[aid] = off
            elif type(stream) is int:
                by_actor[aid] = array("q", (stream, off))
            else:
                stream.append(off)
            offsets = by_type.get(r.event_type)
            if offsets is None:
                by_type[r.event_type] = array("q", (off,))
            else:
                offsets.append(off)
            # a command_id covers the contiguous range of its events
            cid = r.command_id
            seq = r.sequence
            cmds = commands.get(aid)
            if cmds is None:
                commands[aid] = (cid, seq, seq, off)
                continue
            if type(cmds) is tuple:
                if cmds[0] == cid and cmds[2] == seq - 1:
                    commands[aid] = (cid, cmds[1], seq, off)
                    continue
                cmds = commands[aid] = {cmds[0]: cmds[1:]}
            prev = cmds.get(cid)
            if prev is not None and prev[1] == seq - 1:
                cmds[cid] = (prev[0], seq, off)
            else:
                cmds[cid] = (seq, seq, off)

    def append_batch(self, records: list[EventRecord]) -> None:
        self._index(records)
        # publish last: readers of the global feed only ever see indexed records
        self._log.extend(records)

    def _stream(self, actor_id):
        stream = self._by_actor.get(actor_id)
        if stream is None:
            return ()
        return (stream,) if type(stream) is int else stream

    def read_actor(self, actor_id, from_sequence, to_sequence):
        stream = self._stream(actor_id)
        if not stream:
            return []
        end = len(stream) if to_sequence is None else min(to_sequence, len(stream))
        log = self._log
        published = len(log)
        out = [log[o - 1] for o in stream[from_sequence - 1 : end] if o <= published]
        self.stats["examined"] += len(out)
        return out

    def read_global(self, from_offset, limit):
        self.stats["read_global_calls"] += 1
        out = self._log[from_offset - 1 : from_offset - 1 + limit]
        self.stats["examined"] += len(out)
        return out

    def read_by_type(self, event_type, from_offset, limit):
        offsets = self._by_type.get(event_type)
        if not offsets:
            return []
        i = bisect.bisect_left(offsets, from_offset)
        log = self._log
        published = len(log)
        out = [log[o - 1] for o in offsets[i : i + limit] if o <= published]
        self.stats["examined"] += len(out)
        return out

    def actor_head(self, actor_id):
        stream = self._by_actor.get(actor_id)
        if stream is None:
            return 0
        return 1 if type(stream) is int else len(stream)

    def find_command(self, actor_id, command_id):
        cmds = self._commands.get(actor_id)
        if cmds is None:
            return None
        if type(cmds) is tuple:
            return _new_tuple(AppendResult, cmds[1:]) if cmds[0] == command_id else None
        found = cmds.get(command_id)
        return _new_tuple(AppendResult, found) if found is not None else None

    def max_global_offset(self):
        return len(self._log)

    def max_ingest_time(self):
        return self._log[-1].ingest_time if self._log else 0

    def load_snapshots(self, actor_id):
        return list(self._snapshots.get(actor_id, ()))

    def store_snapshots(self, actor_id, snapshots):
        self._snapshots[actor_id] = list(snapshots)


def encode_frame(payload: bytes) -> bytes:
    return _U32.pack(len(payload)) + payload + _U32.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def iter_frames(data: bytes, start: int = len(MAGIC)) -> Iterator[tuple[int, bytes]]:
    """Yield ``(end_position, payload)`` for each intact frame.

    Stops silently at a short or CRC-mismatched frame: that is a torn tail.
    """
    pos = start
    n = len(data)
    while pos + 4 <= n:
        (length,) = _U32.unpack_from(data, pos)
        end = pos + 4 + length + 4
        if end > n:
            return
        payload = data[pos + 4 : pos + 4 + length]
        (crc,) = _U32.unpack_from(data, pos + 4 + length)
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            return
        yield end, payload
        pos = end


def _read_framed_file(path: Path) -> tuple[list[bytes], int]:
    data = path.read_bytes()
    if len(data) < len(MAGIC):
        # crash before the header was fully written
        return [], 0
    if data[: len(MAGIC)] != MAGIC:
        raise StorageCorruption(f"{path}: bad magic {data[:4]!r}")
    payloads = []
    good_end = len(MAGIC)
    for end, payload in iter_frames(data):
        payloads.append(payload)
        good_end = end
    return payloads, good_end


def snapshot_filename(actor_id: str) -> str:
    return hashlib.sha256(actor_id.encode("utf-8")).hexdigest() + ".snap"


class FileLogBackend(MemoryBackend):
    """Durable single-file log; in-memory indexes are rebuilt on open.

    A torn tail (partial frame or CRC mismatch) is truncated away on open.
    Snapshots live next to the log in ``<log>.snapshots/``, one framed file
    per actor.
    """

    def __init__(self, path: str | os.PathLike, fsync: bool = False, snapshot_dir: str | os.PathLike | None = None):
        super().__init__()
        self.path = Path(path)
        self.fsync = fsync
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir else self.path.with_name(self.path.name + ".snapshots")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.recovered_bytes_dropped = 0
        if self.path.exists():
            self._recover()
        else:
            with open(self.path, "wb") as f:
                f.write(MAGIC)
        self._fh = open(self.path, "ab")

    def _recover(self) -> None:
        payloads, good_end = _read_framed_file(self.path)
        size = self.path.stat().st_size
        if good_end == 0:
            with open(self.path, "wb") as f:
                f.write(MAGIC)
            self.recovered_bytes_dropped = size
            return
        if good_end < size:
            self.recovered_bytes_dropped = size - good_end
            with open(self.path, "r+b") as f:
                f.truncate(good_end)
        records = [EventRecord.from_json(json.loads(p)) for p in payloads]
        for expected, r in enumerate(records, 1):
            if r.global_offset != expected:
                raise StorageCorruption(f"{self.path}: offset {r.global_offset} at position {expected}")
        self._index(records)
        self._log.extend(records)

    def append_batch(self, records):
        buf = b"".join(encode_frame(canonical_bytes(r._asdict())) for r in records)
        self._fh.write(buf)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())
        super().append_batch(records)

    def load_snapshots(self, actor_id):
        cached = self._snapshots.get(actor_id)
        if cached is not None:
            return list(cached)
        path = self.snapshot_dir / snapshot_filename(actor_id)
        if not path.exists():
            return []
        payloads, _ = _read_framed_file(path)
        snaps = [Snapshot.from_json(json.loads(p)) for p in payloads]
        self._snapshots[actor_id] = snaps
        return list(snaps)

    def store_snapshots(self, actor_id, snapshots):
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        path = self.snapshot_dir / snapshot_filename(actor_id)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            for s in snapshots:
                f.write(encode_frame(canonical_bytes(s.to_json())))
            f.flush()
            if self.fsync:
                os.fsync(f.fileno())
        os.replace(tmp, path)
        super().store_snapshots(actor_id, snapshots)

    def close(self):
        if not self._fh.closed:
            self._fh.close()


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------


class EventStore:
    def __init__(self, backend: Optional[StorageBackend] = None, clock: Callable[[], int] = now_ms):
        self.backend = backend if backend is not None else MemoryBackend()
        self._clock = clock
        self._stripes = [threading.Lock() for _ in range(LOCK_STRIPES)]
        self._commit_lock = threading.Lock()
        self._last_ingest = self.backend.max_ingest_time()
        self._listeners: list[Callable[[int], None]] = []

    # -- writes --------------------------------------------------------------

    def append(self, actor_id: str, events: Iterable[Mapping[str, Any]], expected_sequence: Optional[int] = None) -> AppendResult:
        if type(actor_id) is not str or not actor_id:
            raise InvalidArgument("actor_id must be a non-empty string")
        if len(actor_id) > MAX_ACTOR_ID_BYTES // 4 and len(actor_id.encode("utf-8")) > MAX_ACTOR_ID_BYTES:
            raise InvalidArgument("actor_id longer than 256 bytes")
        if expected_sequence is not None and (type(expected_sequence) is not int or expected_sequence < 0):
            raise InvalidArgument("expected_sequence must be a non-negative integer")
        prepared = []
        for ev in events:
            event_type = ev.get("event_type")
            if type(event_type) is not str or not event_type:
                raise InvalidArgument("event_type must be a non-empty string")
            command_id = ev.get("command_id")
            if type(command_id) is not str or not command_id:
                raise InvalidArgument("command_id must be a non-empty string")
            event_time = ev.get("event_time")
            if type(event_time) is not int:
                try:
                    event_time = to_ms(event_time)
                except ValueError as exc:
                    raise InvalidArgument(f"bad event_time: {exc}") from None
            payload = ev.get("payload")
            prepared.append((event_type, event_time, validate_payload({} if payload is None else payload), command_id))
        if not prepared:
            raise InvalidArgument("empty batch")

        backend = self.backend
        # one lock covers check and commit; the GIL serializes the work anyway
        with self._commit_lock:
            for p in prepared:
                original = backend.find_command(actor_id, p[3])
                if original is not None:
                    raise DuplicateCommand(f"command {p[3]!r} already applied to {actor_id!r}", original)
            head = backend.actor_head(actor_id)
            if expected_sequence is not None and expected_sequence != head:
                raise SequenceConflict(f"{actor_id!r}: expected sequence {expected_sequence}, actual {head}")
            offset = backend.max_global_offset()
            ingest = self._clock()
            if ingest < self._last_ingest:
                ingest = self._last_ingest
            self._last_ingest = ingest
            i = 0
            records = []
            for et, t, payload, cid in prepared:
                i += 1
                records.append(_new_tuple(EventRecord, (actor_id, head + i, offset + i, et, t, ingest, payload, cid)))
            backend.append_batch(records)
        result = _new_tuple(AppendResult, (head + 1, head + i, offset + i))
        if self._listeners:
            for listener in self._listeners:
                listener(result.last_global_offset)
        return result

    def add_listener(self, fn: Callable[[int], None]) -> None:
        """Register a callback invoked with the last global offset after each commit."""
        self._listeners.append(fn)

    # -- reads ---------------------------------------------------------------

    def read_stream(self, actor_id: str, from_sequence: int = 1, to_sequence: Optional[int] = None) -> list[EventRecord]:
        if from_sequence < 1:
            raise InvalidArgument("from_sequence must be >= 1")
        if to_sequence is not None and from_sequence > to_sequence:
            raise InvalidArgument("from_sequence > to_sequence")
        return self.backend.read_actor(actor_id, from_sequence, to_sequence)

    def read_global(self, from_offset: int = 1, limit: int = 1000) -> list[EventRecord]:
        if from_offset < 1 or limit < 1:
            raise InvalidArgument("from_offset and limit must be >= 1")
        return self.backend.read_global(from_offset, limit)

    def read_by_event_type(self, event_type: str, from_offset: int = 1, limit: int = 1000) -> list[EventRecord]:
        if from_offset < 1 or limit < 1:
            raise InvalidArgument("from_offset and limit must be >= 1")
        return self.backend.read_by_type(event_type, from_offset, limit)

    def max_global_offset(self) -> int:
        return self.backend.max_global_offset()

    def head(self, actor_id: str) -> int:
        return self.backend.actor_head(actor_id)

    # -- snapshots -----------------------------------------------------------

    def save_snapshot(self, actor_id: str, up_to_sequence: int, state: Mapping[str, Any]) -> Snapshot:
        with self._stripes[hash(actor_id) % LOCK_STRIPES]:
            if up_to_sequence < 1 or up_to_sequence > self.backend.actor_head(actor_id):
                raise InvalidArgument(f"snapshot at {up_to_sequence} is ahead of {actor_id!r}")
            snaps = self.backend.load_snapshots(actor_id)
            if snaps and snaps[-1].up_to_sequence >= up_to_sequence:
                raise InvalidArgument("snapshots must have strictly increasing up_to_sequence")
            snap = Snapshot(actor_id, up_to_sequence, dict(state), self._clock())
            self.backend.store_snapshots(actor_id, snaps + [snap])
        return snap

    def load_latest_snapshot(self, actor_id: str) -> Optional[Snapshot]:
        snaps = self.backend.load_snapshots(actor_id)
        return max(snaps, key=lambda s: s.up_to_sequence) if snaps else None

    def prune_snapshots(self, actor_id: str, policy: RetentionPolicy) -> int:
        with self._stripes[hash(actor_id) % LOCK_STRIPES]:
            snaps = sorted(self.backend.load_snapshots(actor_id), key=lambda s: s.up_to_sequence)
            keep = snaps[-policy.keep_last_n :]
            removed = len(snaps) - len(keep)
            if removed:
                self.backend.store_snapshots(actor_id, keep)
        return removed

    def maybe_snapshot(self, actor_id: str, policy: RetentionPolicy, fold: Callable[[dict, EventRecord], dict]) -> Optional[Snapshot]:
        """Snapshot when at least ``min_events_between_snapshots`` events accrued since the last one."""
        head = self.head(actor_id)
        latest = self.load_latest_snapshot(actor_id)
        since = head - (latest.up_to_sequence if latest else 0)
        if since < policy.min_events_between_snapshots:
            return None
        state, seq = self.hydrate(actor_id, fold)
        snap = self.save_snapshot(actor_id, seq, state)
        self.prune_snapshots(actor_id, policy)
        return snap

    def hydrate(self, actor_id: str, fold: Callable[[dict, EventRecord], dict], initial: Optional[dict] = None) -> tuple[dict, int]:
        """Latest snapshot plus the events after it; returns ``(state, sequence)``."""
        snap = self.load_latest_snapshot(actor_id)
        state = dict(snap.state) if snap else dict(initial or {})
        seq = snap.up_to_sequence if snap else 0
        for r in self.read_stream(actor_id, seq + 1):
            state = fold(state, r)
            seq = r.sequence
        return state, seq

    def close(self) -> None:
        self.backend.close()
