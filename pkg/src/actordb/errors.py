"""Exception hierarchy.

Every error carries a stable ``code`` used by the CLI and the wire protocol.
``ValidationError`` subclasses map to exit code 2, everything else to 1.
"""

from __future__ import annotations


class ActorDBError(Exception):
    code = "Error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def to_json(self) -> dict:
        return {"code": self.code, "message": str(self)}


class ValidationError(ActorDBError):
    code = "ValidationError"


class InvalidArgument(ValidationError):
    code = "InvalidArgument"


# event store
class SequenceConflict(ActorDBError):
    code = "SequenceConflict"


class DuplicateCommand(ActorDBError):
    """Raised for an idempotent retry; ``result`` holds the original append range."""

    code = "DuplicateCommand"

    def __init__(self, message: str, result):
        super().__init__(message)
        self.result = result


class StorageCorruption(ActorDBError):
    code = "StorageCorruption"


# projections
class DuplicateName(ValidationError):
    code = "DuplicateName"


class InvalidDefinition(ValidationError):
    code = "InvalidDefinition"


class UnknownProjection(ActorDBError):
    code = "UnknownProjection"


# security
class SecurityError(ActorDBError):
    code = "SecurityError"


class UnknownPrincipal(SecurityError):
    code = "UnknownPrincipal"


class KeyNotOwned(SecurityError):
    code = "KeyNotOwned"


class KeyRevoked(SecurityError):
    code = "KeyRevoked"


class KeyUnknown(SecurityError):
    code = "KeyUnknown"


class TtlTooLong(SecurityError):
    code = "TtlTooLong"


class TokenExpired(SecurityError):
    code = "TokenExpired"


class TokenForged(SecurityError):
    code = "TokenForged"


class BadSignature(SecurityError):
    code = "BadSignature"


class SerializationError(SecurityError):
    code = "SerializationError"


class NoSignature(SecurityError):
    code = "NoSignature"


class AccessDenied(SecurityError):
    code = "AccessDenied"


# query language
class LexError(ValidationError):
    code = "LexError"

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class ParseError(ValidationError):
    code = "ParseError"

    def __init__(self, message: str, position: int, expected: tuple[str, ...] = ()):
        text = f"{message} at position {position}"
        if expected:
            text += f"; expected one of {', '.join(expected)}"
        super().__init__(text)
        self.position = position
        self.expected = expected


class BadTimestamp(ValidationError):
    code = "BadTimestamp"


class ExpressionError(ValidationError):
    code = "ExpressionError"


class UnknownColumn(ValidationError):
    code = "UnknownColumn"


class Overflow(ActorDBError):
    code = "Overflow"


# process dag
class UnknownDependency(ValidationError):
    code = "UnknownDependency"


class CycleDetected(ValidationError):
    code = "CycleDetected"

    def __init__(self, cycle: list[str]):
        super().__init__("cycle: " + " -> ".join(cycle))
        self.cycle = cycle


class DuplicateNode(ValidationError):
    code = "DuplicateNode"


class UnknownNode(ValidationError):
    code = "UnknownNode"
