import itertools
import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actordb.errors import DuplicateCommand, InvalidArgument, SequenceConflict
from actordb.event_store import (
    MAGIC,
    EventStore,
    FileLogBackend,
    MemoryBackend,
    RetentionPolicy,
    encode_frame,
    snapshot_filename,
)
from conftest import ev

_cid = itertools.count()


def fresh(event_type="X", t=0, **payload):
    return ev(event_type, t, cid=f"cmd-{next(_cid)}", **payload)


def test_first_append_to_fresh_actor(store):
    r = store.append("cart-1", [fresh()], expected_sequence=0)
    assert (r.first_sequence, r.last_sequence) == (1, 1)


def test_stale_expectation_conflicts(store):
    store.append("cart-1", [fresh()], expected_sequence=0)
    with pytest.raises(SequenceConflict):
        store.append("cart-1", [fresh()], expected_sequence=0)


def test_three_batches_number_sequences_and_offsets(store):
    results = [store.append("a", [fresh(), fresh()]) for _ in range(3)]
    assert [(r.first_sequence, r.last_sequence, r.last_global_offset) for r in results] == [(1, 2, 2), (3, 4, 4), (5, 6, 6)]
    records = store.read_stream("a")
    assert [r.sequence for r in records] == [1, 2, 3, 4, 5, 6]
    assert [r.global_offset for r in records] == [1, 2, 3, 4, 5, 6]


def test_invalid_arguments(store):
    with pytest.raises(InvalidArgument):
        store.append("", [fresh()])
    with pytest.raises(InvalidArgument):
        store.append("a", [])
    with pytest.raises(InvalidArgument):
        store.append("x" * 257, [fresh()])
    with pytest.raises(InvalidArgument):
        store.append("a", [ev("X", 0, cid="c", nested={"no": 1})])
    with pytest.raises(InvalidArgument):
        store.append("a", [ev("X", 0, cid="c", bad=float("nan"))])
    assert store.max_global_offset() == 0


def test_duplicate_command_returns_original_range(store):
    first = store.append("a", [ev("X", 0, cid="k1"), ev("X", 0, cid="k1")])
    store.append("a", [fresh()])
    with pytest.raises(DuplicateCommand) as info:
        store.append("a", [ev("X", 0, cid="k1")], expected_sequence=1)
    assert info.value.result == first
    assert store.head("a") == 3


def test_same_command_id_on_other_actor_is_not_a_duplicate(store):
    store.append("a", [ev(cid="k")])
    store.append("b", [ev(cid="k")])
    assert store.max_global_offset() == 2


def test_read_stream(store):
    assert store.read_stream("unknown", 1) == []
    for _ in range(3):
        store.append("a", [fresh(), fresh()])
    assert [r.sequence for r in store.read_stream("a", 2, 4)] == [2, 3, 4]
    assert store.read_stream("a", 7) == []
    with pytest.raises(InvalidArgument):
        store.read_stream("a", 4, 2)
    with pytest.raises(InvalidArgument):
        store.read_stream("a", 0)


def test_read_global_interleaves_actors(store):
    assert store.read_global(1, 10) == []
    for actor in "aba":
        store.append(actor, [fresh()])
    assert [r.actor_id for r in store.read_global(1, 3)] == ["a", "b", "a"]
    assert store.read_global(4, 1) == []
    assert [r.global_offset for r in store.read_global(2, 1)] == [2]


def test_read_by_event_type_uses_index(store):
    assert store.read_by_event_type("nope") == []
    store.append("a", [fresh("X"), fresh("Y")])
    for i in range(100):
        store.append(f"filler-{i}", [fresh("Z")])
    store.append("b", [fresh("X")])
    before = store.backend.stats["examined"]
    got = store.read_by_event_type("X", 1, 10)
    assert [r.global_offset for r in got] == [1, 103]
    assert store.backend.stats["examined"] - before == 2
    assert len(store.read_by_event_type("X", 1, 1)) == 1
    assert [r.global_offset for r in store.read_by_event_type("X", 2, 10)] == [103]


def test_ingest_time_is_monotonic_under_clock_regression():
    times = iter([100, 50, 200])
    s = EventStore(clock=lambda: next(times))
    for actor in "abc":
        s.append(actor, [fresh()])
    assert [r.ingest_time for r in s.read_global(1, 10)] == [100, 100, 200]


def test_event_time_accepts_rfc3339(store):
    store.append("a", [ev("X", "2025-09-29T10:00:00Z", cid="c")])
    assert store.read_stream("a")[0].event_time == 1759140000000


def test_records_are_immutable(store):
    payload = {"v": 1}
    store.append("a", [{"event_type": "X", "event_time": 0, "payload": payload, "command_id": "c"}])
    payload["v"] = 2
    rec = store.read_stream("a")[0]
    assert rec.payload == {"v": 1}
    with pytest.raises(AttributeError):
        rec.sequence = 5


# -- snapshots ----------------------------------------------------------------


def sum_fold(state, record):
    return {"total": state.get("total", 0) + record.payload["v"]}


def test_snapshot_lifecycle(store):
    assert store.load_latest_snapshot("a") is None
    for i in range(30):
        store.append("a", [fresh(v=i)])
    for seq in (10, 20, 30):
        store.save_snapshot("a", seq, {"at": seq})
    assert store.prune_snapshots("a", RetentionPolicy(keep_last_n=2)) == 1
    assert store.load_latest_snapshot("a").up_to_sequence == 30
    assert store.prune_snapshots("a", RetentionPolicy(keep_last_n=2)) == 0


def test_snapshot_ahead_of_stream_rejected(store):
    for i in range(50):
        store.append("a", [fresh(v=i)])
    with pytest.raises(InvalidArgument):
        store.save_snapshot("a", 99, {})


def test_snapshot_sequences_strictly_increase(store):
    for i in range(5):
        store.append("a", [fresh(v=i)])
    store.save_snapshot("a", 3, {})
    with pytest.raises(InvalidArgument):
        store.save_snapshot("a", 3, {})


def test_retention_policy_validation():
    with pytest.raises(InvalidArgument):
        RetentionPolicy(keep_last_n=0)


def test_hydration_equivalence(store):
    for i in range(25):
        store.append("a", [fresh(v=i)])
    full = {}
    for r in store.read_stream("a"):
        full = sum_fold(full, r)
    state, seq = store.hydrate("a", sum_fold)
    assert state == full and seq == 25
    snap_state = {}
    for r in store.read_stream("a", 1, 12):
        snap_state = sum_fold(snap_state, r)
    store.save_snapshot("a", 12, snap_state)
    assert store.hydrate("a", sum_fold) == (full, 25)


def test_maybe_snapshot_respects_min_events(store):
    policy = RetentionPolicy(keep_last_n=1, min_events_between_snapshots=10)
    for i in range(9):
        store.append("a", [fresh(v=1)])
    assert store.maybe_snapshot("a", policy, sum_fold) is None
    store.append("a", [fresh(v=1)])
    snap = store.maybe_snapshot("a", policy, sum_fold)
    assert snap.up_to_sequence == 10 and snap.state == {"total": 10}


# -- concurrency -----------------------------------------------------------------


def test_racing_writers_are_gap_free():
    s = EventStore()
    per_writer = 200
    wins = []

    def writer(w):
        done = 0
        while done < per_writer:
            head = s.head("hot")
            try:
                s.append("hot", [ev("X", 0, cid=f"w{w}-{done}")], expected_sequence=head)
            except SequenceConflict:
                continue
            wins.append(head + 1)
            done += 1

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(wins) == list(range(1, 4 * per_writer + 1))
    assert [r.sequence for r in s.read_stream("hot")] == list(range(1, 4 * per_writer + 1))


# -- file log ---------------------------------------------------------------------


def test_file_log_format(tmp_path):
    path = tmp_path / "e.log"
    s = EventStore(FileLogBackend(path), clock=lambda: 5)
    s.append("a", [ev("X", 7, cid="c", b=2, a=1)])
    s.close()
    data = path.read_bytes()
    assert data[:4] == MAGIC
    body = b'{"actor_id":"a","command_id":"c","event_time":7,"event_type":"X","global_offset":1,"ingest_time":5,"payload":{"a":1,"b":2},"sequence":1}'
    assert data[4:] == encode_frame(body)
    assert int.from_bytes(data[4:8], "little") == len(body)


def test_file_log_reopen(tmp_path):
    path = tmp_path / "e.log"
    s = EventStore(FileLogBackend(path))
    s.append("a", [ev("X", 1, cid="c1", v=1), ev("Y", 2, cid="c1", v=2)])
    s.append("b", [ev("X", 3, cid="c2", v=3)])
    s.close()
    s2 = EventStore(FileLogBackend(path))
    assert s2.max_global_offset() == 3
    assert [r.sequence for r in s2.read_stream("a")] == [1, 2]
    assert [r.global_offset for r in s2.read_by_event_type("X")] == [1, 3]
    with pytest.raises(DuplicateCommand) as info:
        s2.append("a", [ev("X", 1, cid="c1")])
    assert (info.value.result.first_sequence, info.value.result.last_sequence) == (1, 2)
    s2.append("a", [ev("X", 4, cid="c3")], expected_sequence=2)
    s2.close()


def test_file_log_snapshots_persist(tmp_path):
    path = tmp_path / "e.log"
    s = EventStore(FileLogBackend(path))
    for i in range(5):
        s.append("actor/1", [fresh(v=i)])
    s.save_snapshot("actor/1", 3, {"total": 3})
    s.close()
    assert (tmp_path / "e.log.snapshots" / snapshot_filename("actor/1")).exists()
    s2 = EventStore(FileLogBackend(path))
    snap = s2.load_latest_snapshot("actor/1")
    assert (snap.up_to_sequence, snap.state) == (3, {"total": 3})
    s2.close()


def _write_log(path, n):
    s = EventStore(FileLogBackend(path))
    for i in range(n):
        s.append(f"a{i % 3}", [ev("X", i, cid=f"c{i}", v=i)])
    s.close()
    return path.read_bytes()


def _boundaries(data):
    pos, out = 4, [4]
    while pos < len(data):
        pos += 8 + int.from_bytes(data[pos : pos + 4], "little")
        out.append(pos)
    return out


def test_truncation_at_every_boundary_and_inside_records(tmp_path):
    data = _write_log(tmp_path / "orig.log", 6)
    bounds = _boundaries(data)
    for cut in range(0, len(data) + 1):
        path = tmp_path / f"cut{cut}.log"
        path.write_bytes(data[:cut])
        s = EventStore(FileLogBackend(path))
        complete = sum(1 for b in bounds[1:] if b <= cut)
        assert s.max_global_offset() == complete, cut
        assert [r.payload["v"] for r in s.read_global(1, 100)] == list(range(complete))
        # log stays appendable after recovery
        s.append("z", [ev("X", 0, cid="after")])
        s.close()
        assert EventStore(FileLogBackend(path)).max_global_offset() == complete + 1


def test_torn_tail_detected_by_crc(tmp_path):
    path = tmp_path / "e.log"
    data = bytearray(_write_log(path, 3))
    data[-5] ^= 0xFF  # corrupt the last record's payload
    path.write_bytes(bytes(data))
    b = FileLogBackend(path)
    assert b.max_global_offset() == 2
    assert b.recovered_bytes_dropped > 0
    b.close()


# -- backend conformance ----------------------------------------------------------

op_strategy = st.lists(
    st.one_of(
        st.tuples(
            st.just("append"),
            st.sampled_from(["a", "b", "c"]),
            st.lists(st.tuples(st.sampled_from(["X", "Y"]), st.integers(0, 50), st.sampled_from(["k1", "k2", "k3", "k4", "k5"])), min_size=1, max_size=3),
            st.one_of(st.none(), st.integers(0, 5)),
        ),
        st.tuples(st.just("stream"), st.sampled_from(["a", "b", "c"]), st.integers(1, 5), st.one_of(st.none(), st.integers(5, 9))),
        st.tuples(st.just("global"), st.integers(1, 10), st.integers(1, 10)),
        st.tuples(st.just("bytype"), st.sampled_from(["X", "Y"]), st.integers(1, 10), st.integers(1, 5)),
        st.tuples(st.just("snapshot"), st.sampled_from(["a", "b", "c"]), st.integers(1, 6)),
        st.tuples(st.just("prune"), st.sampled_from(["a", "b", "c"]), st.integers(1, 3)),
    ),
    max_size=25,
)


def run_ops(store, ops):
    out = []
    for op in ops:
        kind = op[0]
        try:
            if kind == "append":
                _, actor, evs, expected = op
                r = store.append(actor, [ev(t, v, cid=c, v=v) for t, v, c in evs], expected_sequence=expected)
                out.append(tuple(r))
            elif kind == "stream":
                out.append([tuple(r[:4]) + (r.payload,) for r in store.read_stream(op[1], op[2], op[3])])
            elif kind == "global":
                out.append([(r.actor_id, r.sequence, r.global_offset) for r in store.read_global(op[1], op[2])])
            elif kind == "bytype":
                out.append([r.global_offset for r in store.read_by_event_type(op[1], op[2], op[3])])
            elif kind == "snapshot":
                s = store.save_snapshot(op[1], op[2], {"n": op[2]})
                out.append(s.up_to_sequence)
            elif kind == "prune":
                out.append(store.prune_snapshots(op[1], RetentionPolicy(keep_last_n=op[2])))
        except Exception as exc:
            out.append(type(exc).__name__ + getattr(exc, "result", ()).__repr__())
    latest = {a: (lambda s: s and s.up_to_sequence)(store.load_latest_snapshot(a)) for a in "abc"}
    return out, latest


@settings(max_examples=60, deadline=None)
@given(op_strategy)
def test_backends_agree(tmp_path_factory, ops):
    path = tmp_path_factory.mktemp("conf") / "e.log"
    mem = EventStore(MemoryBackend(), clock=lambda: 1)
    fil = EventStore(FileLogBackend(path), clock=lambda: 1)
    assert run_ops(mem, ops) == run_ops(fil, ops)
    fil.close()
    # and reopening the file yields the same feed
    reopened = EventStore(FileLogBackend(path), clock=lambda: 1)
    assert reopened.read_global(1, 1000) == mem.read_global(1, 1000)
    reopened.close()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["k1", "k2", "k3"]), min_size=1, max_size=20))
def test_idempotent_resubmission_never_grows_stream(cids):
    s = EventStore()
    seen = set()
    for cid in cids:
        try:
            s.append("a", [ev(cid=cid)])
        except DuplicateCommand:
            assert cid in seen
        seen.add(cid)
        assert s.head("a") == len(seen)
