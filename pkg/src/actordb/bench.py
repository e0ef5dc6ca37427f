"""Benchmark harness: write throughput, materialized read latency, end-to-end lag.

Each benchmark runs ``warmup_fraction * n`` untimed operations first. Inputs
are built before the clock starts, so the timed loop measures the engine call
only. Like :mod:`timeit`, the cyclic garbage collector is paused during timed
sections unless ``BenchConfig.gc_during_timing`` is set; refcounting still
frees memory as usual.
"""

from __future__ import annotations

import gc
import json
import statistics
import time
import tracemalloc
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from actordb.event_store import EventStore, MemoryBackend
from actordb.projection import Count, Last, Mode, ProjectionDefinition, ProjectionEngine
from actordb.sql import Column, Comparison, Literal

WRITE_GATE_NS = 10_000  # 100k events/s
READ_GATE_MEDIAN_NS = 100_000
E2E_GATE_P99_MS = 200.0
E2E_GATE_MEAN_MS = 50.0


@dataclass
class BenchConfig:
    warmup_fraction: float = 0.10
    gc_during_timing: bool = False
    polling_interval_ms: int = 10
    read_population: int = 10_000
    alloc_sample: int = 10_000
    e2e_poll_sleep_s: float = 0.0002


@dataclass
class BenchReport:
    name: str
    ops: int
    ns_per_op: float
    p50_ns: float
    p99_ns: float
    wall_s: float
    gate: str
    passed: bool
    bytes_per_op: Optional[float] = None
    mean_ns: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ops < 1:
            raise ValueError("ops must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "BenchReport":
        names = {f.name for f in fields(cls)}
        missing = {f.name for f in fields(cls) if f.name not in doc and f.default is f.default_factory}
        if missing - {"bytes_per_op", "mean_ns", "extra"}:
            raise ValueError(f"report lacks {sorted(missing)}")
        return cls(**{k: v for k, v in doc.items() if k in names})

    def table(self) -> str:
        rows = [
            ("benchmark", self.name),
            ("ops", f"{self.ops:,}"),
            ("ns/op", f"{self.ns_per_op:,.0f}"),
            ("ops/s", f"{1e9 / self.ns_per_op:,.0f}" if self.ns_per_op else "inf"),
            ("p50", _fmt_ns(self.p50_ns)),
            ("p99", _fmt_ns(self.p99_ns)),
        ]
        if self.mean_ns is not None:
            rows.append(("mean", _fmt_ns(self.mean_ns)))
        if self.bytes_per_op is not None:
            rows.append(("B/op (retained)", f"{self.bytes_per_op:,.0f}"))
        rows += [("wall", f"{self.wall_s:.2f} s"), ("gate", self.gate), ("result", "PASS" if self.passed else "FAIL")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def _fmt_ns(ns: float) -> str:
    if ns >= 1e6:
        return f"{ns / 1e6:.2f} ms"
    if ns >= 1e3:
        return f"{ns / 1e3:.1f} µs"
    return f"{ns:.0f} ns"


def percentile(samples: list, q: float) -> float:
    """Nearest rank on a sorted copy."""
    s = sorted(samples)
    return s[max(0, min(len(s) - 1, int(-(-q * len(s) // 1)) - 1))]


@contextmanager
def _timing(cfg: BenchConfig):
    was = gc.isenabled()
    if not cfg.gc_during_timing:
        gc.collect()
        gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def gate_write(r: BenchReport) -> bool:
    return r.ns_per_op <= WRITE_GATE_NS


def gate_read(r: BenchReport) -> bool:
    return r.p50_ns <= READ_GATE_MEDIAN_NS


def gate_e2e(r: BenchReport) -> bool:
    return r.p99_ns <= E2E_GATE_P99_MS * 1e6 and (r.mean_ns or 0) <= E2E_GATE_MEAN_MS * 1e6


# ---------------------------------------------------------------------------


def _write_inputs(n: int, prefix: str):
    actors = [f"{prefix}{i}" for i in range(n)]
    batches = [[{"event_type": "Written", "event_time": i, "payload": {"i": i}, "command_id": "c"}] for i in range(n)]
    return actors, batches


def _alloc_per_op(n: int) -> float:
    store = EventStore(MemoryBackend())
    actors, batches = _write_inputs(n, "m")
    tracemalloc.start()
    before = tracemalloc.get_traced_memory()[0]
    for a, b in zip(actors, batches):
        store.append(a, b)
    after = tracemalloc.get_traced_memory()[0]
    tracemalloc.stop()
    return (after - before) / n


def bench_write(n: int, cfg: Optional[BenchConfig] = None) -> BenchReport:
    """Single-threaded appends of one event each to unique actors, in memory."""
    cfg = cfg or BenchConfig()
    store = EventStore(MemoryBackend())
    warm = max(1, int(n * cfg.warmup_fraction))
    wa, wb = _write_inputs(warm, "w")
    for a, b in zip(wa, wb):
        store.append(a, b)
    actors, batches = _write_inputs(n, "a")
    append = store.append
    # every 64th op is timed on its own for the latency distribution
    sampled = []
    clock = time.perf_counter_ns
    with _timing(cfg):
        t0 = clock()
        for i in range(n):
            if i & 63:
                append(actors[i], batches[i])
            else:
                s = clock()
                append(actors[i], batches[i])
                sampled.append(clock() - s)
        total = clock() - t0
    bytes_per_op = _alloc_per_op(min(n, cfg.alloc_sample)) if cfg.alloc_sample else None
    report = BenchReport(
        "write", n, total / n, percentile(sampled, 0.5), percentile(sampled, 0.99), total / 1e9,
        f"ns/op <= {WRITE_GATE_NS} (>= 100k events/s)", False, bytes_per_op,
        extra={"events_per_s": n / (total / 1e9), "warmup_ops": warm, "gc_during_timing": cfg.gc_during_timing},
    )
    report.passed = gate_write(report)
    return report


def _read_engine(population: int) -> ProjectionEngine:
    store = EventStore(MemoryBackend())
    for i in range(population):
        store.append(f"a{i}", [{"event_type": "Written", "event_time": i, "payload": {"v": i}, "command_id": "c"}])
    engine = ProjectionEngine(store)
    engine.register_projection(
        ProjectionDefinition("bench_view", {"Written"}, "$actor_id", (Last("v"), Count("n")), mode=Mode.MATERIALIZED)
    )
    engine.catch_up("bench_view")
    return engine


def bench_read(n: int, cfg: Optional[BenchConfig] = None) -> BenchReport:
    """Point lookups by key on a materialized view."""
    cfg = cfg or BenchConfig()
    pop = max(1, cfg.read_population)
    engine = _read_engine(pop)
    query = engine.query_rows
    warm = max(1, int(n * cfg.warmup_fraction))
    preds = [Comparison(Column("actor_id"), "=", Literal(f"a{(i * 7919) % pop}")) for i in range(n + warm)]
    for p in preds[:warm]:
        query("bench_view", p)
    lat = [0] * n
    clock = time.perf_counter_ns
    misses = 0
    with _timing(cfg):
        t0 = clock()
        for i in range(n):
            s = clock()
            rows = query("bench_view", preds[warm + i])
            lat[i] = clock() - s
            if not rows:
                misses += 1
        total = clock() - t0
    report = BenchReport(
        "read", n, total / n, percentile(lat, 0.5), percentile(lat, 0.99), total / 1e9,
        f"median <= {READ_GATE_MEDIAN_NS // 1000} µs", False, mean_ns=statistics.fmean(lat),
        extra={"population": pop, "misses": misses, "warmup_ops": warm, "gc_during_timing": cfg.gc_during_timing},
    )
    report.passed = gate_read(report) and misses == 0
    return report


def bench_e2e(n: int, cfg: Optional[BenchConfig] = None) -> BenchReport:
    """Append one event, then poll a point query until the row shows it."""
    cfg = cfg or BenchConfig()
    store = EventStore(MemoryBackend())
    engine = ProjectionEngine(store, poll_interval_ms=cfg.polling_interval_ms)
    engine.register_projection(
        ProjectionDefinition("e2e_view", {"Written"}, "$actor_id", (Last("v"),), mode=Mode.MATERIALIZED)
    )
    engine.start()
    warm = max(1, int(n * cfg.warmup_fraction))
    lat = []
    clock = time.perf_counter_ns
    try:
        for i in range(warm + n):
            actor = f"a{i}"
            pred = Comparison(Column("actor_id"), "=", Literal(actor))
            batch = [{"event_type": "Written", "event_time": i, "payload": {"v": i}, "command_id": "c"}]
            s = clock()
            store.append(actor, batch)
            while not engine.query_rows("e2e_view", pred):
                time.sleep(cfg.e2e_poll_sleep_s)
            if i >= warm:
                lat.append(clock() - s)
    finally:
        engine.stop()
    total = sum(lat)
    report = BenchReport(
        "e2e", n, total / n, percentile(lat, 0.5), percentile(lat, 0.99), total / 1e9,
        f"p99 <= {E2E_GATE_P99_MS:.0f} ms and mean <= {E2E_GATE_MEAN_MS:.0f} ms", False,
        mean_ns=statistics.fmean(lat),
        extra={"polling_interval_ms": cfg.polling_interval_ms, "warmup_ops": warm},
    )
    report.passed = gate_e2e(report)
    return report


BENCHES = {"write": bench_write, "read": bench_read, "e2e": bench_e2e}


def run(name: str, n: int, cfg: Optional[BenchConfig] = None) -> BenchReport:
    return BENCHES[name](n, cfg)


def report_json(report: BenchReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True)
