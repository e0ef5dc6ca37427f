"""Canonical JSON encoding and time helpers shared across modules."""

from __future__ import annotations

import base64
import json
import time
from datetime import datetime, timezone
from typing import Any


def canonical_json(doc: Any) -> str:
    """Sorted keys, no insignificant whitespace, NaN/inf rejected."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def canonical_bytes(doc: Any) -> bytes:
    return canonical_json(doc).encode("utf-8")


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    if not isinstance(text, str) or any(c in text for c in "=+/ \n"):
        raise ValueError("not base64url")
    pad = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + pad)


def now_ms() -> int:
    return time.time_ns() // 1_000_000


def parse_timestamp(text: str) -> int:
    """Parse an RFC-3339 timestamp into UTC epoch milliseconds.

    A timezone designator is mandatory.
    """
    if not isinstance(text, str) or "T" not in text.upper():
        raise ValueError(f"not an RFC-3339 timestamp: {text!r}")
    s = text.strip()
    if s[-1] in "zZ":
        s = s[:-1] + "+00:00"
    s = s[:10] + "T" + s[11:]
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp lacks a timezone: {text!r}")
    delta = dt - datetime(1970, 1, 1, tzinfo=timezone.utc)
    return (delta.days * 86_400 + delta.seconds) * 1000 + delta.microseconds // 1000


def format_timestamp(ms: int) -> str:
    dt = datetime.fromtimestamp(ms // 1000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{ms % 1000:03d}Z"


def to_ms(value: Any) -> int:
    """Accept epoch milliseconds or an RFC-3339 string."""
    if isinstance(value, bool):
        raise ValueError("boolean is not a timestamp")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        return parse_timestamp(value)
    raise ValueError(f"not a timestamp: {value!r}")
