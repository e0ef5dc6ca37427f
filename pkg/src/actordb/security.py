"""Message-level security: signed commands, PoP tokens, policies, audit.

Wire forms (all base64url without padding, canonical JSON inside):

* token:    ``b64(body) "." b64(authority signature over body)``
* envelope: ``b64(header) "." b64(body) "." b64(signature)`` where the
  signature covers ``header_bytes + b"." + body_bytes`` and the header embeds
  the token, so the token is bound to the envelope.

Every signature is Ed25519. Decoding is strict: a base64 string that does
not re-encode to itself is rejected, which closes the unused-bits
malleability of base64.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, NoEncryption, PrivateFormat, PublicFormat

from actordb.canonical import b64url, b64url_decode, canonical_bytes, now_ms
from actordb.errors import (
    BadSignature,
    InvalidArgument,
    KeyNotOwned,
    KeyRevoked,
    KeyUnknown,
    SecurityError,
    SerializationError,
    TokenExpired,
    TokenForged,
    TtlTooLong,
    UnknownPrincipal,
    ValidationError,
)
from actordb.sql import (
    COMPARISON_OPS,
    TRUE,
    Expression,
    compare,
    disjoin,
    format_expression,
    parse_expression,
)

ALGORITHM = "EdDSA"
MAX_TTL_S = 300
CLOCK_SKEW_MS = 2000
MASK = "***"
AUDIT_ACTIONS = frozenset(
    {"command_accepted", "command_rejected", "query", "policy_change", "key_revoked", "dead_letter", "promotion_decision", "token_issued"}
)


def _strict_b64(text: str) -> bytes:
    raw = b64url_decode(text)
    if b64url(raw) != text:
        raise ValueError("non-canonical base64")
    return raw


def _reject_constant(name):
    raise ValueError(f"non-finite number {name}")


def _strict_json(raw: bytes):
    doc = json.loads(raw, parse_constant=_reject_constant)
    if not isinstance(doc, dict):
        raise ValueError("expected a JSON object")
    return doc


def raw_public(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def raw_private(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


def key_from_seed(seed: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(seed)


def key_id_for(public: bytes) -> str:
    return "k_" + hashlib.sha256(public).hexdigest()[:20]


# ---------------------------------------------------------------------------
# Identities and keys
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Principal:
    principal_id: str
    roles: frozenset = frozenset()
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.principal_id:
            raise InvalidArgument("principal_id must be non-empty")
        object.__setattr__(self, "roles", frozenset(self.roles))
        object.__setattr__(self, "attributes", dict(self.attributes))

    def __hash__(self):
        return hash((self.principal_id, self.roles))

    def to_json(self) -> dict:
        return {"principal_id": self.principal_id, "roles": sorted(self.roles), "attributes": dict(self.attributes)}

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "Principal":
        return cls(doc["principal_id"], frozenset(doc.get("roles", ())), dict(doc.get("attributes", {})))


@dataclass(frozen=True)
class KeyRecord:
    key_id: str
    public_key: bytes
    owner: str
    status: str = "active"  # "active" | "revoked"
    revoked_at: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "key_id": self.key_id,
            "public_key": b64url(self.public_key),
            "owner": self.owner,
            "status": self.status,
            "revoked_at": self.revoked_at,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "KeyRecord":
        return cls(doc["key_id"], b64url_decode(doc["public_key"]), doc["owner"], doc.get("status", "active"), doc.get("revoked_at"))


class KeyRegistry:
    """Keys by id plus an append-only revocation feed.

    Updates replace the whole mapping, so readers never see a partial write.
    """

    def __init__(self):
        self._keys: dict[str, KeyRecord] = {}
        self._feed: list[tuple[str, int]] = []
        self._lock = threading.Lock()

    def add(self, record: KeyRecord) -> None:
        if len(record.public_key) != 32:
            raise InvalidArgument("public key must be 32 bytes")
        with self._lock:
            existing = self._keys.get(record.key_id)
            if existing is not None and existing.public_key != record.public_key:
                raise InvalidArgument(f"key_id {record.key_id!r} already in use")
            keys = dict(self._keys)
            keys[record.key_id] = record
            self._keys = keys
            if record.status == "revoked" and all(k != record.key_id for k, _ in self._feed):
                self._feed = self._feed + [(record.key_id, record.revoked_at or 0)]

    def get(self, key_id: str) -> Optional[KeyRecord]:
        return self._keys.get(key_id)

    def all(self) -> list[KeyRecord]:
        return list(self._keys.values())

    def revoke(self, key_id: str, now: int) -> bool:
        """Returns False when the key was already revoked."""
        with self._lock:
            rec = self._keys.get(key_id)
            if rec is None:
                raise KeyUnknown(f"unknown key {key_id!r}")
            if rec.status == "revoked":
                return False
            keys = dict(self._keys)
            keys[key_id] = KeyRecord(rec.key_id, rec.public_key, rec.owner, "revoked", now)
            self._keys = keys
            self._feed = self._feed + [(key_id, now)]
            return True

    def revocation_feed(self, from_index: int = 0) -> list[tuple[str, int]]:
        return self._feed[from_index:]


class RevocationView:
    """A verifier's possibly stale copy of the revocation feed.

    Refreshed lazily: the first check at least ``poll_interval_ms`` after the
    previous refresh pulls the feed, so propagation is bounded by the interval.
    """

    def __init__(self, registry: KeyRegistry, poll_interval_ms: int = 5000, now: Optional[int] = None):
        if poll_interval_ms <= 0:
            raise InvalidArgument("poll interval must be positive")
        self.registry = registry
        self.poll_interval_ms = poll_interval_ms
        self._revoked: frozenset = frozenset()
        self._cursor = 0
        self._last_refresh = -(2**62)
        self._lock = threading.Lock()
        self.refresh(now_ms() if now is None else now)

    def refresh(self, now: int) -> None:
        with self._lock:
            new = self.registry.revocation_feed(self._cursor)
            if new:
                self._revoked = self._revoked | {k for k, _ in new}
                self._cursor += len(new)
            self._last_refresh = now

    def is_revoked(self, key_id: str, now: int) -> bool:
        if now - self._last_refresh >= self.poll_interval_ms:
            self.refresh(now)
        return key_id in self._revoked


# ---------------------------------------------------------------------------
# Tokens and envelopes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PopToken:
    token_id: str
    principal_id: str
    key_id: str
    issued_at: int
    expires_at: int
    signature: bytes = b""

    def body(self) -> dict:
        return {
            "token_id": self.token_id,
            "principal_id": self.principal_id,
            "key_id": self.key_id,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
        }

    def body_bytes(self) -> bytes:
        return canonical_bytes(self.body())

    def encode(self) -> str:
        return b64url(self.body_bytes()) + "." + b64url(self.signature)

    @classmethod
    def decode(cls, wire: str) -> "PopToken":
        try:
            body_b64, sig_b64 = wire.split(".")
            raw = _strict_b64(body_b64)
            doc = _strict_json(raw)
            if not all(type(doc.get(k)) is str for k in ("token_id", "principal_id", "key_id")):
                raise ValueError("token ids must be strings")
            if not all(type(doc.get(k)) is int for k in ("issued_at", "expires_at")):
                raise ValueError("token times must be integers")
            token = cls(
                doc["token_id"],
                doc["principal_id"],
                doc["key_id"],
                doc["issued_at"],
                doc["expires_at"],
                _strict_b64(sig_b64),
            )
            if set(doc) != set(token.body()) or token.body_bytes() != raw:
                raise ValueError("non-canonical token body")
            return token
        except (ValueError, KeyError, TypeError, AttributeError, OverflowError, RecursionError) as exc:
            raise TokenForged(f"malformed token: {exc}") from None


@dataclass(frozen=True)
class SignedCommand:
    header: dict
    body: dict
    signature: bytes
    header_bytes: bytes
    body_bytes: bytes

    @property
    def key_id(self) -> str:
        return self.header["key_id"]

    @property
    def command_id(self) -> str:
        return self.header["command_id"]

    @property
    def token(self) -> PopToken:
        return PopToken.decode(self.header["token"])

    @property
    def actor_id(self) -> str:
        return self.body["actor_id"]

    @property
    def expected_sequence(self) -> Optional[int]:
        return self.body["expected_sequence"]

    def store_events(self) -> list[dict]:
        """Body events with the envelope's command_id attached, ready for ``EventStore.append``."""
        return [dict(e, command_id=self.command_id) for e in self.body["events"]]

    def encode(self) -> str:
        return ".".join((b64url(self.header_bytes), b64url(self.body_bytes), b64url(self.signature)))

    @classmethod
    def decode(cls, wire: str) -> "SignedCommand":
        try:
            parts = wire.split(".")
            if len(parts) != 3:
                raise ValueError("envelope needs three parts")
            header_bytes, body_bytes, signature = (_strict_b64(p) for p in parts)
            header = _strict_json(header_bytes)
            body = _strict_json(body_bytes)
            if not isinstance(header, dict) or not isinstance(body, dict):
                raise ValueError("header and body must be objects")
            for k in ("alg", "key_id", "issued_at", "command_id", "token"):
                if k not in header:
                    raise ValueError(f"header lacks {k}")
            for k in ("actor_id", "expected_sequence", "events"):
                if k not in body:
                    raise ValueError(f"body lacks {k}")
            if canonical_bytes(header) != header_bytes or canonical_bytes(body) != body_bytes:
                raise ValueError("non-canonical JSON")
            return cls(header, body, signature, header_bytes, body_bytes)
        except (ValueError, AttributeError, TypeError, OverflowError, RecursionError) as exc:
            raise BadSignature(f"malformed envelope: {exc}") from None


def sign_command(
    signing_key: Ed25519PrivateKey,
    token: Union[PopToken, str],
    actor_id: str,
    expected_sequence: Optional[int],
    events: Iterable[Mapping[str, Any]],
    issued_at: Optional[int] = None,
    command_id: Optional[str] = None,
) -> SignedCommand:
    """Build a detached-signature envelope.

    ``events`` are ``{event_type, event_time, payload}`` documents. The
    default command_id is derived from the body, so signing the same command
    twice yields the same id and a retry is idempotent.
    """
    token = token if isinstance(token, PopToken) else PopToken.decode(token)
    body = {
        "actor_id": actor_id,
        "expected_sequence": expected_sequence,
        "events": [
            {"event_type": e["event_type"], "event_time": e["event_time"], "payload": dict(e.get("payload", {}))}
            for e in events
        ],
    }
    try:
        body_bytes = canonical_bytes(body)
    except (TypeError, ValueError) as exc:
        raise SerializationError(f"body is not serializable: {exc}") from None
    header = {
        "alg": ALGORITHM,
        "key_id": token.key_id,
        "issued_at": now_ms() if issued_at is None else issued_at,
        "command_id": command_id or "cmd_" + hashlib.sha256(body_bytes).hexdigest()[:32],
        "token": token.encode(),
    }
    header_bytes = canonical_bytes(header)
    signature = signing_key.sign(header_bytes + b"." + body_bytes)
    return SignedCommand(header, body, signature, header_bytes, body_bytes)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeCondition:
    attribute: str
    op: str
    value: Any

    def holds(self, principal: Principal) -> bool:
        return compare(principal.attributes.get(self.attribute), self.op, self.value)


@dataclass(frozen=True)
class Policy:
    policy_id: str
    effect: str  # "allow" | "deny"
    resource: str = "*"
    role_any_of: frozenset = frozenset()
    attribute_conditions: tuple = ()
    row_predicate: Optional[str] = None
    column_masks: frozenset = frozenset()
    default: bool = False

    def __post_init__(self):
        object.__setattr__(self, "role_any_of", frozenset(self.role_any_of))
        object.__setattr__(self, "column_masks", frozenset(self.column_masks))
        object.__setattr__(self, "attribute_conditions", tuple(
            c if isinstance(c, AttributeCondition) else AttributeCondition(*c) for c in self.attribute_conditions
        ))
        if self.effect not in ("allow", "deny"):
            raise ValidationError(f"policy {self.policy_id!r}: effect must be allow or deny")
        if not self.policy_id:
            raise ValidationError("policy_id required")
        if not self.role_any_of and not self.attribute_conditions and not self.default:
            raise ValidationError(f"policy {self.policy_id!r} matches everyone; mark it default")
        for c in self.attribute_conditions:
            if c.op not in COMPARISON_OPS:
                raise ValidationError(f"policy {self.policy_id!r}: bad operator {c.op!r}")
        if self.effect == "deny" and (self.row_predicate or self.column_masks):
            raise ValidationError(f"policy {self.policy_id!r}: deny policies apply to the whole resource")
        object.__setattr__(self, "_predicate", parse_expression(self.row_predicate) if self.row_predicate else TRUE)

    @property
    def predicate(self) -> Expression:
        return self._predicate

    def matches(self, principal: Principal, resource: str) -> bool:
        if self.resource != "*" and self.resource != resource:
            return False
        if self.role_any_of and not (self.role_any_of & principal.roles):
            return False
        return all(c.holds(principal) for c in self.attribute_conditions)

    def to_json(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "effect": self.effect,
            "resource": self.resource,
            "role_any_of": sorted(self.role_any_of),
            "attribute_conditions": [[c.attribute, c.op, c.value] for c in self.attribute_conditions],
            "row_predicate": self.row_predicate,
            "column_masks": sorted(self.column_masks),
            "default": self.default,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "Policy":
        try:
            return cls(
                policy_id=doc["policy_id"],
                effect=str(doc["effect"]).lower(),
                resource=doc.get("resource", "*"),
                role_any_of=frozenset(doc.get("role_any_of", ())),
                attribute_conditions=tuple(AttributeCondition(*c) for c in doc.get("attribute_conditions", ())),
                row_predicate=doc.get("row_predicate"),
                column_masks=frozenset(doc.get("column_masks", ())),
                default=bool(doc.get("default", False)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad policy document: {exc}") from None


@dataclass(frozen=True)
class PolicyDecision:
    decision: str  # "allow" | "deny"
    row_predicate: Expression
    masks: frozenset
    policy_ids: tuple = ()

    @property
    def allowed(self) -> bool:
        return self.decision == "allow"


def combine_policies(policies: Iterable[Policy], principal: Principal, resource: str) -> PolicyDecision:
    """Deny by default; any matching deny wins; allows OR their predicates and intersect masks."""
    allows = []
    for p in policies:
        if not p.matches(principal, resource):
            continue
        if p.effect == "deny":
            return PolicyDecision("deny", TRUE, frozenset(), (p.policy_id,))
        allows.append(p)
    if not allows:
        return PolicyDecision("deny", TRUE, frozenset())
    predicate = disjoin(*(p.predicate for p in allows))
    masks = frozenset.intersection(*(p.column_masks for p in allows))
    return PolicyDecision("allow", predicate, masks, tuple(p.policy_id for p in allows))


def apply_masks(row: Mapping[str, Any], masks: Iterable[str], key_column: Optional[str] = None) -> dict:
    masks = set(masks)
    if not masks:
        return dict(row)
    return {k: (MASK if k in masks and k != key_column else v) for k, v in row.items()}


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    sequence: int
    timestamp: int
    principal_id: str
    action: str
    resource: str
    decision: str
    reason: str

    def to_json(self) -> dict:
        return {
            "sequence": self.sequence,
            "timestamp": self.timestamp,
            "principal_id": self.principal_id,
            "action": self.action,
            "resource": self.resource,
            "decision": self.decision,
            "reason": self.reason,
        }


class AuditLog:
    """Append-only audit stream with gap-free sequence numbers.

    Kept in memory; with ``path`` set every record is also appended to a
    JSON-lines file. Several processes may share the file (``serve`` plus
    admin CLI calls): each append holds an exclusive ``flock`` and first
    reads records other writers added, so numbering stays gap-free.
    """

    def __init__(self, path: Optional[Union[str, os.PathLike]] = None, clock: Callable[[], int] = now_ms):
        self._records: list[AuditRecord] = []
        self._lock = threading.Lock()
        self._clock = clock
        self.path = Path(path) if path else None
        self._fh = None
        self._consumed = 0  # bytes of the file already mirrored in _records
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a+b")
            with self._lock:
                self._sync()

    def _sync(self) -> None:
        self._fh.seek(self._consumed)
        data = self._fh.read()
        end = data.rfind(b"\n") + 1  # a writer mid-line is picked up next time
        for line in data[:end].splitlines():
            if line.strip():
                self._records.append(AuditRecord(**json.loads(line)))
        self._consumed += end

    def emit(self, principal_id: str, action: str, resource: str, decision: str = "n/a", reason: str = "") -> AuditRecord:
        if action not in AUDIT_ACTIONS:
            raise InvalidArgument(f"unknown audit action {action!r}")
        with self._lock:
            if self._fh is None:
                rec = self._next(principal_id, action, resource, decision, reason)
                self._records.append(rec)
                return rec
            fcntl.flock(self._fh, fcntl.LOCK_EX)
            try:
                self._sync()
                rec = self._next(principal_id, action, resource, decision, reason)
                line = (json.dumps(rec.to_json(), sort_keys=True) + "\n").encode("utf-8")
                self._fh.write(line)
                self._fh.flush()
                self._consumed += len(line)
                self._records.append(rec)
            finally:
                fcntl.flock(self._fh, fcntl.LOCK_UN)
        return rec

    def _next(self, principal_id, action, resource, decision, reason) -> AuditRecord:
        return AuditRecord(len(self._records) + 1, self._clock(), principal_id or "", action, resource or "", decision, reason)

    def read(self, from_seq: int = 1) -> list[AuditRecord]:
        return self._records[max(from_seq, 1) - 1 :]

    @property
    def head(self) -> int:
        return len(self._records)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# Facade
# ---------------------------------------------------------------------------


class SecurityLayer:
    def __init__(
        self,
        authority_key: Optional[Ed25519PrivateKey] = None,
        audit: Optional[AuditLog] = None,
        revocation_poll_interval_ms: int = 5000,
        clock: Callable[[], int] = now_ms,
    ):
        self.authority_key = authority_key or Ed25519PrivateKey.generate()
        self.authority_public = self.authority_key.public_key()
        self.clock = clock
        self.audit = audit or AuditLog(clock=clock)
        self.keys = KeyRegistry()
        self.revocations = RevocationView(self.keys, revocation_poll_interval_ms, clock())
        self._principals: dict[str, Principal] = {}
        self._policies: tuple[Policy, ...] = ()
        self._lock = threading.Lock()

    # -- identities ----------------------------------------------------------

    def register_principal(self, principal: Principal) -> Principal:
        with self._lock:
            principals = dict(self._principals)
            principals[principal.principal_id] = principal
            self._principals = principals
        return principal

    def principal(self, principal_id: str) -> Principal:
        p = self._principals.get(principal_id)
        if p is None:
            raise UnknownPrincipal(f"unknown principal {principal_id!r}")
        return p

    def principals(self) -> list[Principal]:
        return list(self._principals.values())

    def register_key(self, principal_id: str, public_key: Union[bytes, Ed25519PublicKey], key_id: Optional[str] = None) -> KeyRecord:
        self.principal(principal_id)
        raw = public_key if isinstance(public_key, bytes) else raw_public(public_key)
        rec = KeyRecord(key_id or key_id_for(raw), raw, principal_id)
        self.keys.add(rec)
        return rec

    def new_key(self, principal_id: str) -> tuple[Ed25519PrivateKey, KeyRecord]:
        private = Ed25519PrivateKey.generate()
        return private, self.register_key(principal_id, private.public_key())

    # -- tokens --------------------------------------------------------------

    def issue_token(self, principal_id: str, key_id: str, ttl_s: float = MAX_TTL_S, now: Optional[int] = None) -> PopToken:
        now = self.clock() if now is None else now
        self.principal(principal_id)
        if ttl_s > MAX_TTL_S:
            raise TtlTooLong(f"ttl {ttl_s}s exceeds {MAX_TTL_S}s")
        if ttl_s <= 0:
            raise InvalidArgument("ttl must be positive")
        rec = self.keys.get(key_id)
        if rec is None:
            raise KeyUnknown(f"unknown key {key_id!r}")
        if rec.owner != principal_id:
            raise KeyNotOwned(f"key {key_id!r} is not owned by {principal_id!r}")
        if rec.status == "revoked":
            raise KeyRevoked(f"key {key_id!r} is revoked")
        unsigned = PopToken("t_" + secrets.token_hex(12), principal_id, key_id, now, now + int(ttl_s * 1000))
        token = PopToken(**{**unsigned.body(), "signature": self.authority_key.sign(unsigned.body_bytes())})
        self.audit.emit(principal_id, "token_issued", key_id, "allow", f"ttl {ttl_s}s")
        return token

    def _check_token(self, token: PopToken, now: int) -> KeyRecord:
        try:
            self.authority_public.verify(token.signature, token.body_bytes())
        except InvalidSignature:
            raise TokenForged("token signature does not verify under the authority key") from None
        if token.expires_at - token.issued_at > MAX_TTL_S * 1000:
            raise TokenForged("token lifetime exceeds the maximum")
        if now >= token.expires_at:
            raise TokenExpired("token expired")
        if now < token.issued_at - CLOCK_SKEW_MS:
            raise TokenExpired("token not yet valid")
        rec = self.keys.get(token.key_id)
        if rec is None:
            raise KeyUnknown(f"unknown key {token.key_id!r}")
        if rec.owner != token.principal_id:
            raise TokenForged("token binds a key its principal does not own")
        return rec

    def verify_token(self, token: Union[PopToken, str], now: Optional[int] = None, resource: str = "") -> Principal:
        """Authenticate a bare token (query path). Rejections are audited as ``query`` denials."""
        now = self.clock() if now is None else now
        principal_id = ""
        try:
            token = token if isinstance(token, PopToken) else PopToken.decode(token)
            principal_id = token.principal_id
            self._check_token(token, now)
            if self.revocations.is_revoked(token.key_id, now):
                raise KeyRevoked(f"key {token.key_id!r} is revoked")
            return self.principal(token.principal_id)
        except SecurityError as exc:
            self.audit.emit(principal_id, "query", resource, "deny", f"{exc.code}: {exc}")
            raise

    def verify_command(self, cmd: Union[SignedCommand, str], now: Optional[int] = None) -> Principal:
        """Check token signature, expiry, key binding, revocation, then the envelope signature."""
        now = self.clock() if now is None else now
        principal_id, resource = "", ""
        try:
            if isinstance(cmd, str):
                cmd = SignedCommand.decode(cmd)
            resource = str(cmd.body.get("actor_id", ""))
            token = cmd.token
            principal_id = token.principal_id
            rec = self._check_token(token, now)
            if cmd.header.get("alg") != ALGORITHM:
                raise BadSignature(f"unsupported algorithm {cmd.header.get('alg')!r}")
            if cmd.key_id != token.key_id:
                raise BadSignature("envelope key does not match the token's key")
            if self.revocations.is_revoked(token.key_id, now):
                raise KeyRevoked(f"key {token.key_id!r} is revoked")
            try:
                Ed25519PublicKey.from_public_bytes(rec.public_key).verify(cmd.signature, cmd.header_bytes + b"." + cmd.body_bytes)
            except InvalidSignature:
                raise BadSignature("envelope signature does not verify") from None
            principal = self.principal(token.principal_id)
        except SecurityError as exc:
            self.audit.emit(principal_id, "command_rejected", resource, "deny", f"{exc.code}: {exc}")
            raise
        self.audit.emit(principal.principal_id, "command_accepted", resource, "allow", cmd.command_id)
        return principal

    def revoke_key(self, key_id: str, now: Optional[int] = None, principal_id: str = "system") -> None:
        now = self.clock() if now is None else now
        if self.keys.revoke(key_id, now):
            self.audit.emit(principal_id, "key_revoked", key_id, "n/a", "revoked")

    # -- policies ------------------------------------------------------------

    @property
    def policies(self) -> tuple[Policy, ...]:
        return self._policies

    def upsert_policy(self, policy: Policy, principal_id: str = "system") -> None:
        with self._lock:
            self._policies = tuple(p for p in self._policies if p.policy_id != policy.policy_id) + (policy,)
        self.audit.emit(principal_id, "policy_change", policy.resource, "n/a", f"upsert {policy.policy_id}")

    def remove_policy(self, policy_id: str, principal_id: str = "system") -> bool:
        with self._lock:
            before = len(self._policies)
            self._policies = tuple(p for p in self._policies if p.policy_id != policy_id)
            removed = len(self._policies) < before
        if removed:
            self.audit.emit(principal_id, "policy_change", "*", "n/a", f"remove {policy_id}")
        return removed

    def load_policies(self, doc: Union[Mapping, list], principal_id: str = "system") -> list[Policy]:
        items = doc.get("policies", []) if isinstance(doc, Mapping) else doc
        policies = [Policy.from_json(d) for d in items]
        for p in policies:
            self.upsert_policy(p, principal_id)
        return policies

    def evaluate_policy(self, principal: Principal, resource: str, audit: bool = True) -> PolicyDecision:
        decision = combine_policies(self._policies, principal, resource)
        if audit:
            reason = "policies: " + ",".join(decision.policy_ids) if decision.policy_ids else "no matching policy"
            self.audit.emit(principal.principal_id, "query", resource, decision.decision, reason)
        return decision

    # -- persistence (used by the CLI) --------------------------------------

    def to_json(self) -> dict:
        return {
            "authority_seed": b64url(raw_private(self.authority_key)),
            "principals": [p.to_json() for p in self._principals.values()],
            "keys": [k.to_json() for k in self.keys.all()],
            "policies": [p.to_json() for p in self._policies],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any], audit: Optional[AuditLog] = None, revocation_poll_interval_ms: int = 5000, clock=now_ms) -> "SecurityLayer":
        layer = cls(key_from_seed(b64url_decode(doc["authority_seed"])), audit, revocation_poll_interval_ms, clock)
        for p in doc.get("principals", []):
            layer.register_principal(Principal.from_json(p))
        for k in doc.get("keys", []):
            layer.keys.add(KeyRecord.from_json(k))
        layer._policies = tuple(Policy.from_json(p) for p in doc.get("policies", []))
        layer.revocations.refresh(clock())
        return layer

    def sync_from_json(self, doc: Mapping[str, Any]) -> dict:
        """Merge admin changes another process saved (see :meth:`to_json`).

        Principals and keys are added or updated, revocations are applied
        (never undone) and the policy set is replaced. Nothing is audited
        here: the writing process already did that. Returns change counts.
        """
        if b64url_decode(doc["authority_seed"]) != raw_private(self.authority_key):
            raise InvalidArgument("state file belongs to a different authority")
        changes = {"principals": 0, "keys": 0, "revoked": 0, "policies": 0}
        for pdoc in doc.get("principals", []):
            p = Principal.from_json(pdoc)
            if self._principals.get(p.principal_id) != p:
                self.register_principal(p)
                changes["principals"] += 1
        for kdoc in doc.get("keys", []):
            rec = KeyRecord.from_json(kdoc)
            mine = self.keys.get(rec.key_id)
            if mine is None:
                self.keys.add(rec)
                changes["keys"] += 1
            elif rec.status == "revoked" and mine.status != "revoked":
                self.keys.revoke(rec.key_id, rec.revoked_at or self.clock())
                changes["revoked"] += 1
        policies = tuple(Policy.from_json(d) for d in doc.get("policies", []))
        if policies != self._policies:
            with self._lock:
                self._policies = policies
            changes["policies"] = len(policies)
        return changes


def describe_predicate(expr: Expression) -> str:
    return format_expression(expr)
