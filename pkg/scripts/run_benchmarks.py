#!/usr/bin/env python3
"""Run the write, read and end-to-end benchmarks and print one table each.

    python scripts/run_benchmarks.py --write-n 1000000 --read-n 100000 --e2e-n 1000 --out results/bench.json
"""

import argparse
import json
import platform
import sys
from pathlib import Path

from actordb import bench


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--write-n", type=int, default=1_000_000)
    ap.add_argument("--read-n", type=int, default=100_000)
    ap.add_argument("--e2e-n", type=int, default=1000)
    ap.add_argument("--polling-interval-ms", type=int, default=10)
    ap.add_argument("--gc-during-timing", action="store_true")
    ap.add_argument("--repeat", type=int, default=1, help="runs per benchmark; the table shows each run")
    ap.add_argument("--out", type=Path, help="write all reports as JSON")
    args = ap.parse_args(argv)

    cfg = bench.BenchConfig(polling_interval_ms=args.polling_interval_ms, gc_during_timing=args.gc_during_timing)
    plan = [("write", args.write_n), ("read", args.read_n), ("e2e", args.e2e_n)]
    reports = []
    for name, n in plan:
        if n <= 0:
            continue
        for _ in range(args.repeat):
            r = bench.run(name, n, cfg)
            reports.append(r)
            print(r.table(), end="\n\n", flush=True)

    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "python": sys.version.split()[0],
            "machine": platform.machine(),
            "config": vars(cfg),
            "reports": [r.to_json() for r in reports],
        }
        args.out.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return 0 if all(r.passed for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
