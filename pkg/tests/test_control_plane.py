import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actordb.control_plane import ControlPlane, PromotionPolicy, SloTarget, WindowStats, nearest_rank
from actordb.errors import InvalidArgument
from actordb.event_store import EventStore
from actordb.projection import Count, Mode, ProjectionDefinition, ProjectionEngine
from actordb.security import AuditLog

W = 10_000


def feed(cp, name, window, latency_ms, n=50):
    """n samples evenly spread across one window."""
    for i in range(n):
        cp.record_sample(name, "OnDemandCatchUp", latency_ms, window * W + i * (W // n))


def test_nearest_rank():
    assert nearest_rank([1.0] * 100, 0.99) == 1.0
    assert nearest_rank(list(range(1, 101)), 0.99) == 99
    assert nearest_rank([5], 0.99) == 5
    assert nearest_rank([], 0.99) is None


def test_quiet_window():
    s = WindowStats(0, [300.0] * 19)
    assert s.p99(20) is None
    s.samples.append(1.0)
    assert s.p99(20) == 300.0


def test_validation():
    with pytest.raises(InvalidArgument):
        SloTarget("v", 50, 200)
    with pytest.raises(InvalidArgument):
        PromotionPolicy(violation_windows=0)
    with pytest.raises(InvalidArgument):
        ControlPlane().record_sample("v", "OnDemandCatchUp", -1, 0)


def test_three_violating_windows_promote():
    cp = ControlPlane()
    for w in range(3):
        feed(cp, "v", w, 300)
    decisions = cp.evaluate(3 * W)
    assert [(d.action, d.window) for d in decisions] == [("promote", 2)]


def test_two_bad_then_healthy_no_decision():
    cp = ControlPlane()
    feed(cp, "v", 0, 300)
    feed(cp, "v", 1, 300)
    feed(cp, "v", 2, 5)
    assert cp.evaluate(3 * W) == []


def test_quiet_windows_are_skipped_not_counted():
    cp = ControlPlane()
    feed(cp, "v", 0, 300)
    feed(cp, "v", 2, 300, n=5)  # quiet
    feed(cp, "v", 4, 300)
    feed(cp, "v", 5, 300)
    decisions = cp.evaluate(6 * W)
    assert [(d.action, d.window) for d in decisions] == [("promote", 5)]


def test_low_rate_does_not_promote():
    cp = ControlPlane(policy=PromotionPolicy(min_samples=5, min_query_rate_hz=1.0))
    for w in range(3):
        feed(cp, "v", w, 300, n=8)  # 0.8 Hz
    assert cp.evaluate(3 * W) == []


def test_evaluate_granularity_does_not_matter():
    a, b = ControlPlane(), ControlPlane()
    for cp in (a, b):
        for w in range(40):
            feed(cp, "v", w, 300 if w % 7 < 4 else 5)
    out_a = a.evaluate(40 * W)
    out_b = [d for t in range(1, 41) for d in b.evaluate(t * W)]
    assert out_a == out_b


def test_temporal_samples_ignored():
    cp = ControlPlane()
    for w in range(3):
        for i in range(50):
            cp.record_sample("v", "TemporalReplay", 900, w * W + i)
    assert cp.evaluate(3 * W) == []


def test_promote_then_demote_after_idle():
    audit = AuditLog()
    cp = ControlPlane(audit=audit)
    for w in range(3):
        feed(cp, "v", w, 300)
    decisions = [d for t in range(1, 40) for d in cp.evaluate(t * W)]
    assert [(d.action, d.window) for d in decisions] == [("promote", 2), ("demote", 32)]
    assert [r.decision for r in audit.read() if r.action == "promotion_decision"] == ["promote", "demote"]


def _transitions(pattern, policy):
    cp = ControlPlane(policy=policy)
    for w, bad in enumerate(pattern):
        if bad is not None:
            feed(cp, "v", w, 300 if bad else 5, n=25)
    return cp.evaluate(len(pattern) * W)


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.sampled_from([True, False, None]), min_size=1, max_size=60),
    st.integers(1, 4),
    st.integers(1, 6),
    st.integers(1, 8),
)
def test_anti_thrash(pattern, k, m, c):
    policy = PromotionPolicy(violation_windows=k, idle_windows=m, cooldown_windows=c)
    decisions = _transitions(pattern, policy)
    windows = [d.window for d in decisions]
    assert all(b - a >= c for a, b in zip(windows, windows[1:]))
    # actions alternate since each flips the assumed mode
    assert all(x.action != y.action for x, y in zip(decisions, decisions[1:]))
    assert decisions == _transitions(pattern, policy)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([True, False, None]), min_size=3, max_size=20), st.data())
def test_monotone_trigger(pattern, data):
    policy = PromotionPolicy(cooldown_windows=1)
    base = ControlPlane(policy=policy)
    worse = ControlPlane(policy=policy)
    for w, bad in enumerate(pattern):
        if bad is None:
            continue
        lat = 300 if bad else 5
        feed(base, "v", w, lat, n=25)
        feed(worse, "v", w, lat, n=25)
        if bad and data.draw(st.booleans()):
            feed(worse, "v", w, 1000, n=5)
    first_base = next((d for d in base.evaluate(len(pattern) * W) if d.action == "promote"), None)
    first_worse = next((d for d in worse.evaluate(len(pattern) * W) if d.action == "promote"), None)
    if first_base is not None:
        assert first_worse is not None and first_worse.window <= first_base.window


def _engine():
    store = EventStore()
    eng = ProjectionEngine(store)
    eng.register_projection(ProjectionDefinition("v", {"X"}, "$actor_id", (Count(),)))
    return store, eng


def test_apply_sets_mode_and_defers_when_busy():
    store, eng = _engine()
    audit = AuditLog()
    cp = ControlPlane(eng, audit)
    assert cp.apply([]) == []
    for w in range(3):
        feed(cp, "v", w, 300)
    eng._view("v").rebuilding = True
    decisions = cp.evaluate(3 * W)
    assert cp.apply(decisions) == [] and len(cp.pending) == 1
    assert eng.mode("v") == Mode.ON_DEMAND
    eng._view("v").rebuilding = False
    assert [d.action for d in cp.tick(4 * W)] == ["promote"]
    assert eng.mode("v") == Mode.MATERIALIZED


def test_apply_unknown_projection_is_skipped():
    from actordb.control_plane import Decision

    _, eng = _engine()
    audit = AuditLog()
    cp = ControlPlane(eng, audit)
    assert cp.apply([Decision("ghost", "promote", 0, "x")]) == []
    assert "skipped" in audit.read()[-1].reason


def test_health_reports_lag():
    store, eng = _engine()
    cp = ControlPlane(eng, AuditLog())
    assert cp.health(0)["projections"]["v"]["lag"] == 0
    for i in range(5):
        store.append(f"a{i}", [{"event_type": "X", "event_time": 0, "payload": {}, "command_id": f"c{i}"}])
    h = cp.health(0)
    assert h["projections"]["v"]["lag"] == 5 and h["store_max_offset"] == 5
    eng.catch_up("v")
    assert cp.health(0)["projections"]["v"]["lag"] == 0


def test_health_json_golden():
    store, eng = _engine()
    cp = ControlPlane(eng, AuditLog())
    assert cp.health_json(0) == (
        '{"audit_head":0,"projections":{"v":{"current_window_p99_ms":null,"dead_letters":0,'
        '"lag":0,"mode":"on_demand","watermark_ms":0}},"store_max_offset":0}'
    )
    json.loads(cp.health_json(0))
