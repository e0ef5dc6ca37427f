#!/usr/bin/env python3
"""Worst-case time from revoke_key to the first rejected command, per poll interval.

Runs on a simulated clock: each trial revokes at a random phase of the
refresh cycle, then submits a command every --step-ms until one is rejected.
The delay is bounded by the poll interval plus one step.
"""

import argparse
import random
import statistics
import sys

from actordb.errors import KeyRevoked
from actordb.security import Principal, SecurityLayer, key_from_seed, sign_command


class Clock:
    def __init__(self, t: int):
        self.t = t

    def __call__(self) -> int:
        return self.t


def trial(poll_ms: int, phase_ms: int, step_ms: int, seed: int) -> int:
    clock = Clock(1_759_140_000_000)
    sec = SecurityLayer(key_from_seed(bytes(32)), revocation_poll_interval_ms=poll_ms, clock=clock)
    sec.register_principal(Principal("p", {"writer"}))
    key = key_from_seed(seed.to_bytes(32, "little"))
    rec = sec.register_key("p", key.public_key())
    token = sec.issue_token("p", rec.key_id, 300)
    events = [{"event_type": "X", "event_time": 0}]
    sec.verify_command(sign_command(key, token, "a", 0, events))
    clock.t += phase_ms
    sec.revoke_key(rec.key_id)
    revoked_at = clock.t
    while True:
        try:
            sec.verify_command(sign_command(key, token, "a", 0, events, issued_at=clock.t))
        except KeyRevoked:
            return clock.t - revoked_at
        clock.t += step_ms


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--polls-ms", type=int, nargs="+", default=[1000, 2000, 5000, 10_000, 30_000])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--step-ms", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = random.Random(args.seed)
    print(f"{'poll_ms':>8}  {'mean_ms':>8}  {'max_ms':>8}  bound_ms")
    for poll in args.polls_ms:
        delays = [trial(poll, rng.randrange(poll), args.step_ms, i + 1) for i in range(args.trials)]
        print(f"{poll:>8}  {statistics.fmean(delays):>8.0f}  {max(delays):>8}  {poll + args.step_ms}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
