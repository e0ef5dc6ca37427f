import itertools

import pytest

from actordb.event_store import EventStore, FileLogBackend, MemoryBackend


_cids = itertools.count(1)


def ev(event_type="X", t=0, cid=None, **payload):
    return {"event_type": event_type, "event_time": t, "payload": payload, "command_id": cid or f"c-{next(_cids)}"}


class Clock:
    """Manually advanced millisecond clock."""

    def __init__(self, start=0):
        self.t = start

    def __call__(self):
        return self.t

    def advance(self, ms):
        self.t += ms


@pytest.fixture(params=["memory", "file"])
def store(request, tmp_path):
    if request.param == "memory":
        backend = MemoryBackend()
    else:
        backend = FileLogBackend(tmp_path / "events.log")
    s = EventStore(backend)
    yield s
    s.close()


@pytest.fixture
def clock():
    return Clock(1_000_000)


# (criterion number, line) pairs filled in by test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
