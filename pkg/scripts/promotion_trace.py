#!/usr/bin/env python3
"""Replay a scripted load trace through the control plane on a simulated clock.

The default trace has four phases: light traffic, a hot spell with slow
on-demand reads, fast reads once the view is materialized, then silence.
Prints one row per 10 s window with the observed p99, the mode after the
window closed, and any decision taken.
"""

import argparse
import random
import sys

from actordb.control_plane import ControlPlane, PromotionPolicy
from actordb.event_store import EventStore
from actordb.projection import Count, Mode, ProjectionDefinition, ProjectionEngine

# (windows, queries per second, latency in ms when on-demand, latency when materialized)
DEFAULT_TRACE = [(5, 0.5, 40, 2), (8, 5, 320, 3), (10, 5, 320, 3), (40, 0, 0, 0)]


def parse_trace(spec: str):
    phases = []
    for part in spec.split(","):
        w, hz, od, mat = part.split(":")
        phases.append((int(w), float(hz), float(od), float(mat)))
    return phases


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trace", type=parse_trace, default=DEFAULT_TRACE,
                    help="windows:hz:on_demand_ms:materialized_ms,... (default: a four-phase trace)")
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--m", type=int, default=30)
    ap.add_argument("--cooldown", type=int, default=6)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    policy = PromotionPolicy(violation_windows=args.k, idle_windows=args.m, cooldown_windows=args.cooldown)
    engine = ProjectionEngine(EventStore())
    engine.register_projection(ProjectionDefinition("v", {"X"}, "$actor_id", (Count("n"),)))
    cp = ControlPlane(engine, policy=policy)
    cp.track("v", engine.mode("v"))
    rng = random.Random(args.seed)
    wms = policy.window_ms

    print(f"{'window':>6}  {'qps':>5}  {'p99_ms':>8}  {'mode':<12}  decision")
    w = 0
    for windows, hz, on_demand, materialized in args.trace:
        for _ in range(windows):
            n = int(hz * wms / 1000)
            base = on_demand if engine.mode("v") == Mode.ON_DEMAND else materialized
            for i in range(n):
                cp.record_sample("v", "OnDemandCatchUp", base * rng.uniform(0.8, 1.2), w * wms + i * wms // max(n, 1))
            p99 = cp.current_p99("v", w * wms)
            decisions = cp.tick((w + 1) * wms)
            note = "; ".join(f"{d.action} ({d.reason})" for d in decisions)
            print(f"{w:>6}  {hz:>5.1f}  {'quiet' if p99 is None else f'{p99:.1f}':>8}  {engine.mode('v').value:<12}  {note}")
            w += 1
    print(f"\n{len(cp.decisions)} decisions: " + ", ".join(f"{d.action}@{d.window}" for d in cp.decisions))
    return 0


if __name__ == "__main__":
    sys.exit(main())
