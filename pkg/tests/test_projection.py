import json
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actordb.errors import DuplicateName, InvalidDefinition, UnknownProjection
from actordb.event_store import EventRecord, EventStore
from actordb.projection import (
    ColumnSpec,
    Count,
    Disposition,
    Last,
    Max,
    Min,
    Mode,
    ProjectionDefinition,
    ProjectionEngine,
    Sum,
    ViewState,
    apply_event,
    load_definitions,
    register_fold,
)
from actordb.scheduler import Priority

S = 1000


def cart_def(**kw):
    base = dict(
        name="cart_view",
        source_event_types={"ItemAdded"},
        key_expr="cart_id",
        columns=(Count("items"), Sum("qty"), Last("last_sku", "sku"), Min("min_qty", "qty"), Max("max_qty", "qty")),
    )
    base.update(kw)
    return ProjectionDefinition(**base)


def add(store, cart, t, qty=1, sku="x", actor=None, etype="ItemAdded"):
    n = store.max_global_offset() + 1
    store.append(actor or cart, [{"event_type": etype, "event_time": t, "payload": {"cart_id": cart, "qty": qty, "sku": sku}, "command_id": f"c{n}"}])


def rec(t, offset=1, **payload):
    return EventRecord("a", offset, offset, "ItemAdded", t, 0, payload, f"c{offset}")


@pytest.fixture
def engine():
    return ProjectionEngine(EventStore())


def test_register_twice_is_duplicate(engine):
    engine.register_projection(cart_def())
    with pytest.raises(DuplicateName):
        engine.register_projection(cart_def())


def test_count_over_empty_store(engine):
    engine.register_projection(cart_def())
    assert engine.query_rows("cart_view") == []


def test_three_events_one_key(engine):
    engine.register_projection(cart_def())
    for i, q in enumerate([2, 5, 1]):
        add(engine.store, "k", i * S, qty=q, sku=f"s{i}")
    engine.catch_up("cart_view")
    assert engine.query_rows("cart_view") == [
        {"cart_id": "k", "items": 3, "qty": 8, "last_sku": "s2", "min_qty": 1, "max_qty": 5}
    ]


def test_invalid_definitions():
    with pytest.raises(InvalidDefinition):
        cart_def(source_event_types=set())
    with pytest.raises(InvalidDefinition):
        cart_def(columns=(Count("a"), Count("a")))
    with pytest.raises(InvalidDefinition):
        cart_def(columns=(ColumnSpec("x", "median", "x"),))
    with pytest.raises(InvalidDefinition):
        cart_def(allowed_lateness_ms=-1)
    with pytest.raises(InvalidDefinition):
        cart_def(columns=(ColumnSpec("x", "custom", fn="nope"),))
    with pytest.raises(InvalidDefinition):
        ProjectionDefinition.from_json({"name": "x"})


def test_definition_json_round_trip():
    d = cart_def(event_time_field="ts", mode="materialized")
    doc = json.loads(json.dumps(d.to_json()))
    assert ProjectionDefinition.from_json(doc) == d
    assert load_definitions({"projections": [doc]}) == [d]


def test_catch_up(engine):
    engine.register_projection(cart_def())
    assert engine.catch_up("cart_view").events_applied == 0
    add(engine.store, "a", 0)
    add(engine.store, "b", 0)
    r = engine.catch_up("cart_view")
    assert (r.events_applied, r.new_applied_offset) == (2, 2)
    r = engine.catch_up("cart_view")
    assert (r.events_applied, r.new_applied_offset) == (0, 2)
    add(engine.store, "a", 0, etype="Other")
    r = engine.catch_up("cart_view")
    assert (r.events_applied, r.new_applied_offset) == (0, 3)
    assert len(engine.query_rows("cart_view")) == 2
    with pytest.raises(UnknownProjection):
        engine.catch_up("nope")


def test_catch_up_respects_max_batch(engine):
    engine.register_projection(cart_def())
    for i in range(5):
        add(engine.store, "a", i)
    assert engine.catch_up("cart_view", max_batch=2).new_applied_offset == 2
    assert engine.catch_up("cart_view", max_batch=10).new_applied_offset == 5


# -- late events ------------------------------------------------------------------


def test_dispositions():
    d = cart_def(allowed_lateness_ms=5 * S, correction_window_ms=60 * S)
    st_ = ViewState()
    assert apply_event(st_, d, rec(1000 * S, cart_id="k", qty=1)).disposition == Disposition.APPLIED
    assert st_.watermark_ms == 995 * S
    out = apply_event(st_, d, rec(965 * S, 2, cart_id="k", qty=1))
    assert out == (Disposition.CORRECTED, 30 * S)
    out = apply_event(st_, d, rec(995 * S - 2 * 3600 * S, 3, cart_id="k", qty=1))
    assert out.disposition == Disposition.DEAD_LETTERED
    assert st_.rows["k"]["items"] == 2
    assert [dl.global_offset for dl in st_.dead_letters] == [3]


def test_window_boundary_is_inclusive():
    d = cart_def(allowed_lateness_ms=0, correction_window_ms=10)
    st_ = ViewState()
    apply_event(st_, d, rec(100, cart_id="k"))
    assert apply_event(st_, d, rec(90, 2, cart_id="k")).disposition == Disposition.CORRECTED
    assert apply_event(st_, d, rec(89, 3, cart_id="k")).disposition == Disposition.DEAD_LETTERED


def test_non_numeric_sum_is_dead_lettered():
    d = cart_def()
    st_ = ViewState()
    out = apply_event(st_, d, rec(0, cart_id="k", qty="three"))
    assert out.disposition == Disposition.DEAD_LETTERED
    assert "non-numeric" in st_.dead_letters[0].reason
    assert st_.rows == {}


def test_missing_key_and_bad_time_dead_lettered():
    st_ = ViewState()
    apply_event(st_, cart_def(), rec(0, qty=1))
    apply_event(st_, cart_def(event_time_field="ts"), rec(0, 2, cart_id="k", ts="yesterday"))
    assert [d.reason for d in st_.dead_letters] == ["missing or unusable key", "bad event time"]


def test_event_time_field_overrides_record_time():
    d = cart_def(event_time_field="ts", allowed_lateness_ms=0, correction_window_ms=0)
    st_ = ViewState()
    apply_event(st_, d, rec(0, cart_id="k", ts="2025-09-29T10:00:00Z"))
    assert st_.watermark_ms == 1759140000000


def test_dead_letter_accessors(engine):
    engine.register_projection(cart_def())
    assert engine.dead_letters("cart_view") == []
    assert engine.watermark("cart_view") == 0
    add(engine.store, "k", 10_000 * S)
    add(engine.store, "k", 10_000 * S - 2 * 3600 * S)
    engine.catch_up("cart_view")
    dls = engine.dead_letters("cart_view")
    assert len(dls) == 1 and dls[0].lateness_ms == 2 * 3600 * S - 5 * S
    line = json.loads(engine.export_dead_letters("cart_view"))
    assert line["reason"] == "beyond correction window"


def reference_fold(events, lateness, window):
    """Independent oracle: recompute dispositions and per-key count/sum/min/max."""
    max_seen = None
    wm = 0
    rows, dead = {}, []
    for i, (key, t, v) in enumerate(events, 1):
        if t < wm and wm - t > window:
            dead.append(i)
            continue
        max_seen = t if max_seen is None else max(max_seen, t)
        wm = max(wm, max_seen - lateness)
        r = rows.setdefault(key, {"n": 0, "s": 0, "values": []})
        r["n"] += 1
        r["s"] += v
        r["values"].append(v)
    return {k: (r["n"], r["s"], min(r["values"]), max(r["values"])) for k, r in rows.items()}, dead


event_streams = st.lists(
    st.tuples(st.sampled_from(["a", "b", "c"]), st.integers(0, 200), st.integers(-50, 50)), max_size=60
)


@settings(max_examples=150, deadline=None)
@given(event_streams, st.integers(0, 30), st.integers(0, 60))
def test_fold_matches_reference(events, lateness, window):
    store = EventStore()
    for key, t, v in events:
        add(store, key, t, qty=v)
    eng = ProjectionEngine(store)
    eng.register_projection(cart_def(allowed_lateness_ms=lateness, correction_window_ms=window))
    rows = {r["cart_id"]: (r["items"], r["qty"], r["min_qty"], r["max_qty"]) for r in eng.query_rows("cart_view")}
    expected_rows, expected_dead = reference_fold(events, lateness, window)
    assert rows == expected_rows
    assert [d.global_offset for d in eng.dead_letters("cart_view")] == expected_dead


@settings(max_examples=100, deadline=None)
@given(event_streams, st.integers(0, 30), st.integers(0, 60), st.integers(1, 7), st.randoms(use_true_random=False))
def test_rebuild_equals_incremental(events, lateness, window, batch, rnd):
    store = EventStore()
    eng = ProjectionEngine(store, batch_size=batch, rebuild_chunk=3)
    eng.register_projection(cart_def(allowed_lateness_ms=lateness, correction_window_ms=window))
    for key, t, v in events:
        add(store, key, t, qty=v)
        if rnd.random() < 0.3:
            eng.catch_up("cart_view")
    eng.catch_up("cart_view")
    before = eng.state("cart_view").canonical()
    eng.rebuild("cart_view")
    assert eng.state("cart_view").canonical() == before


@settings(max_examples=50, deadline=None)
@given(event_streams)
def test_two_engines_are_deterministic(events):
    store = EventStore()
    for key, t, v in events:
        add(store, key, t, qty=v)
    states = []
    for batch in (1, 1000):
        eng = ProjectionEngine(store, batch_size=batch)
        eng.register_projection(cart_def(allowed_lateness_ms=5, correction_window_ms=20))
        snapshots = []
        for _ in range(len(events)):
            eng.catch_up("cart_view", max_batch=1)
            snapshots.append(eng.state("cart_view").canonical())
        states.append(snapshots)
    assert states[0] == states[1]


@settings(max_examples=50, deadline=None)
@given(event_streams)
def test_watermark_never_decreases(events):
    d = cart_def(allowed_lateness_ms=7, correction_window_ms=25)
    st_ = ViewState()
    prev = st_.watermark_ms
    for i, (key, t, v) in enumerate(events, 1):
        apply_event(st_, d, rec(t, i, cart_id=key, qty=v))
        assert st_.watermark_ms >= prev
        prev = st_.watermark_ms


def test_rebuild_of_empty_projection(engine):
    engine.register_projection(cart_def())
    assert engine.rebuild("cart_view").rows == 0


def test_custom_fold_hook(engine):
    register_fold("concat_skus", lambda prev, r: (prev or "") + r.payload["sku"])
    engine.register_projection(cart_def(columns=(ColumnSpec("skus", "custom", fn="concat_skus"),)))
    add(engine.store, "k", 0, sku="a")
    add(engine.store, "k", 1, sku="b")
    assert engine.query_rows("cart_view") == [{"cart_id": "k", "skus": "ab"}]


def test_actor_id_key(engine):
    engine.register_projection(ProjectionDefinition("per_actor", {"ItemAdded"}, "$actor_id", (Count("n"),)))
    add(engine.store, "k", 0, actor="actor-1")
    add(engine.store, "k", 0, actor="actor-1")
    assert engine.query_rows("per_actor") == [{"actor_id": "actor-1", "n": 2}]


# -- queries --------------------------------------------------------------------------


def test_as_of_replay(engine):
    engine.register_projection(cart_def(columns=(Last("x"),)))
    t1, t2 = 100 * S, 200 * S
    engine.store.append("k", [{"event_type": "ItemAdded", "event_time": t1, "payload": {"cart_id": "k", "x": 1}, "command_id": "1"}])
    engine.store.append("k", [{"event_type": "ItemAdded", "event_time": t2, "payload": {"cart_id": "k", "x": 2}, "command_id": "2"}])
    assert engine.query_rows("cart_view", as_of=t1 - 1) == []
    assert engine.query_rows("cart_view", as_of=t1)[0]["x"] == 1
    assert engine.query_rows("cart_view", as_of=t2 - 1)[0]["x"] == 1
    assert engine.query_rows("cart_view", as_of=t2)[0]["x"] == 2
    assert engine.query_rows("cart_view", as_of=10**13)[0]["x"] == 2


def test_as_of_replay_excludes_dead_lettered(engine):
    engine.register_projection(cart_def(allowed_lateness_ms=0, correction_window_ms=0))
    add(engine.store, "k", 100)
    add(engine.store, "k", 50)  # dead-lettered live
    assert engine.query_rows("cart_view", as_of=60) == []
    assert engine.query_rows("cart_view", as_of=1000)[0]["items"] == 1


def test_predicate_filters_to_one_key(engine):
    engine.register_projection(cart_def())
    add(engine.store, "some-uuid", 0)
    add(engine.store, "other", 0)
    rows = engine.query_rows("cart_view", "cart_id = 'some-uuid'")
    assert [r["cart_id"] for r in rows] == ["some-uuid"]
    assert engine.query_rows("cart_view", "cart_id = 'some-uuid' AND items > 5") == []
    assert len(engine.query_rows("cart_view", "items >= 1")) == 2


def test_set_mode(engine):
    engine.register_projection(cart_def())
    assert engine.set_mode("cart_view", Mode.ON_DEMAND) == Mode.ON_DEMAND
    for i in range(3):
        add(engine.store, "k", i)
    assert engine.set_mode("cart_view", "materialized") == Mode.ON_DEMAND
    assert engine.lag("cart_view") == 0
    reads = engine.store.backend.stats["read_global_calls"]
    engine.query_rows("cart_view", "cart_id = 'k'")
    engine.query_rows("cart_view")
    assert engine.store.backend.stats["read_global_calls"] == reads
    # on-demand queries catch up per query
    engine.set_mode("cart_view", Mode.ON_DEMAND)
    add(engine.store, "k", 5)
    assert engine.query_rows("cart_view")[0]["items"] == 4
    assert engine.store.backend.stats["read_global_calls"] > reads


def test_rebuild_is_preempted_by_interactive_work():
    store = EventStore()
    for i in range(50):
        add(store, f"k{i % 5}", i)
    eng = ProjectionEngine(store, rebuild_chunk=10)
    eng.register_projection(cart_def())
    eng.register_projection(cart_def(name="other"))
    sched = eng.scheduler
    submitted = []

    def on_step(task):
        if task.work == "rebuild" and not submitted:
            submitted.append(sched.submit("other", Priority.INTERACTIVE, "catch_up", iter([None])))

    sched.on_step = on_step
    eng.rebuild("cart_view")
    works = [(e.work, e.priority) for e in sched.log]
    first_interactive = works.index(("catch_up", Priority.INTERACTIVE))
    assert works[0] == ("rebuild", Priority.BATCH)
    assert first_interactive == 1
    assert ("rebuild", Priority.BATCH) in works[first_interactive + 1 :]
    assert all(e.interactive_queued == 0 for e in sched.log if e.priority == Priority.BATCH)


def test_batch_never_runs_with_interactive_queued():
    eng = ProjectionEngine(EventStore())
    eng.register_projection(cart_def())
    sched = eng.scheduler

    def gen(n):
        for _ in range(n):
            yield

    for i in range(5):
        sched.submit("cart_view", Priority.BATCH, "rebuild", gen(3))
        sched.submit("cart_view", Priority.INTERACTIVE, "catch_up", gen(2))
    sched.run_pending()
    assert all(e.interactive_queued == 0 for e in sched.log if e.priority == Priority.BATCH)
    assert [e.priority for e in sched.log][:15] == [Priority.INTERACTIVE] * 15


def test_background_polling_materialized():
    store = EventStore()
    eng = ProjectionEngine(store, poll_interval_ms=5)
    eng.register_projection(cart_def(mode="materialized"))
    eng.scheduler.start()
    eng.start()
    try:
        add(store, "k", 0)
        done = threading.Event()
        for _ in range(400):
            if eng.state("cart_view").rows:
                done.set()
                break
            threading.Event().wait(0.005)
        assert done.is_set()
    finally:
        eng.stop()
        eng.scheduler.stop()


def test_change_listener_receives_insert_update_correction(engine):
    engine.register_projection(cart_def(allowed_lateness_ms=0, correction_window_ms=100))
    seen = []
    engine.add_listener("cart_view", lambda p, k, change, row, v: seen.append((k, change, v)))
    add(engine.store, "k", 1000)
    add(engine.store, "k", 1001)
    add(engine.store, "k", 950)
    engine.catch_up("cart_view")
    assert seen == [("k", "insert", 1), ("k", "update", 2), ("k", "correction", 3)]


def test_min_max_window_legal_order_matches_refold():
    rng = random.Random(7)
    d = cart_def(allowed_lateness_ms=50, correction_window_ms=10_000)
    values = [(rng.randint(0, 100), rng.randint(-100, 100)) for _ in range(300)]
    st_ = ViewState()
    for i, (t, v) in enumerate(values, 1):
        apply_event(st_, d, rec(t, i, cart_id="k", qty=v))
    row = st_.rows["k"]
    assert (row["min_qty"], row["max_qty"]) == (min(v for _, v in values), max(v for _, v in values))
    assert sum(st_.multisets[("k", "min_qty")].values()) == 300
