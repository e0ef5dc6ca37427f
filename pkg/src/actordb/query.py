"""Query planning and execution with row-level security applied underneath.

The policy decision comes first: a denied principal fails in :meth:`plan`
before the projection engine (and therefore the store) is touched. The
effective predicate is the user's WHERE clause conjoined with the policy's
row predicate; masks are applied to every outgoing row, including
subscription notifications.
"""

from __future__ import annotations

import queue
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Optional, Union

from actordb.errors import AccessDenied, InvalidArgument, Overflow, UnknownColumn, UnknownProjection
from actordb.projection import Mode, ProjectionEngine
from actordb.security import Principal, PolicyDecision, SecurityLayer, apply_masks
from actordb.sql import (
    TRUE,
    And,
    Expression,
    QueryStatement,
    columns_of,
    compile_predicate,
    conjoin,
    parse,
)

SCHEMA = "projections"


class Route(str, Enum):
    MATERIALIZED = "FromMaterializedState"
    ON_DEMAND = "OnDemandCatchUp"
    TEMPORAL = "TemporalReplay"


@dataclass(frozen=True)
class QueryPlan:
    statement: QueryStatement
    principal: Principal
    projection: str
    route: Route
    predicate: Expression
    masks: frozenset
    key_column: str
    decision: PolicyDecision


@dataclass(frozen=True)
class ChangeNotification:
    projection: str
    key: Any
    change: str  # insert | update | correction
    row: dict
    version: int

    def to_json(self) -> dict:
        return {"projection": self.projection, "key": self.key, "change": self.change, "row": self.row, "version": self.version}


def _flatten(e: Optional[Expression]) -> list:
    if e is None or e == TRUE:
        return []
    return list(e.items) if isinstance(e, And) else [e]


def _key_order(row_key):
    # keys of mixed types still sort deterministically
    return (type(row_key).__name__, row_key)


class Subscription:
    """Bounded stream of :class:`ChangeNotification`.

    When the consumer falls ``capacity`` notifications behind the stream is
    cut: the listener detaches and the next read past the buffered items
    raises :class:`Overflow`.
    """

    def __init__(self, plan: QueryPlan, capacity: int):
        self.plan = plan
        self.capacity = capacity
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._test = compile_predicate(plan.predicate, plan.principal)
        self._detach: Optional[Callable[[], None]] = None
        self.closed = False
        self.error: Optional[Overflow] = None

    def _on_change(self, name, key, change, row, version):
        if self.closed or not self._test(row):
            return
        note = ChangeNotification(name, key, change, apply_masks(row, self.plan.masks, self.plan.key_column), version)
        try:
            self._queue.put_nowait(note)
        except queue.Full:
            self.error = Overflow(f"subscriber fell more than {self.capacity} notifications behind")
            self.close()

    def get(self, timeout: Optional[float] = None) -> Optional[ChangeNotification]:
        """Next notification, or None on timeout. Raises Overflow once the buffer is drained after a cut."""
        try:
            return self._queue.get(timeout=timeout) if timeout else self._queue.get_nowait()
        except queue.Empty:
            if self.error is not None:
                raise self.error from None
            return None

    def drain(self) -> list[ChangeNotification]:
        out = []
        while True:
            try:
                out.append(self._queue.get_nowait())
            except queue.Empty:
                return out

    def close(self) -> None:
        self.closed = True
        if self._detach is not None:
            self._detach()
            self._detach = None


class QueryInterface:
    def __init__(
        self,
        engine: ProjectionEngine,
        security: SecurityLayer,
        control=None,
        subscription_capacity: int = 1024,
        clock: Callable[[], int] = None,
    ):
        self.engine = engine
        self.security = security
        self.control = control
        self.subscription_capacity = subscription_capacity
        self.clock = clock or security.clock

    def plan(self, stmt: Union[QueryStatement, str], principal: Principal) -> QueryPlan:
        if isinstance(stmt, str):
            stmt = parse(stmt)
        decision = self.security.evaluate_policy(principal, stmt.target)
        if not decision.allowed:
            raise AccessDenied(f"{principal.principal_id} may not read {stmt.target}")
        if stmt.schema != SCHEMA or stmt.name not in self.engine.names():
            raise UnknownProjection(f"unknown projection {stmt.target!r}")
        defn = self.engine.definition(stmt.name)
        known = set(defn.column_names())
        referenced = set(stmt.select_list or ()) | columns_of(stmt.predicate)
        missing = sorted(referenced - known)
        if missing:
            raise UnknownColumn(f"{stmt.target} has no column(s) {', '.join(missing)}")
        predicate = conjoin(*_flatten(stmt.predicate), *_flatten(decision.row_predicate))
        if stmt.as_of is not None:
            route = Route.TEMPORAL
        elif self.engine.mode(stmt.name) == Mode.MATERIALIZED:
            route = Route.MATERIALIZED
        else:
            route = Route.ON_DEMAND
        return QueryPlan(stmt, principal, stmt.name, route, predicate, decision.masks, defn.key_column, decision)

    def execute(self, plan: QueryPlan) -> list[dict]:
        stmt = plan.statement
        if stmt.kind != "select":
            raise InvalidArgument("execute takes a SELECT plan; use subscribe for SUBSCRIBE")
        t0 = time.perf_counter()
        rows = self.engine.query_rows(plan.projection, plan.predicate, stmt.as_of, plan.principal)
        key = plan.key_column
        rows.sort(key=lambda r: _key_order(r.get(key)))
        if stmt.limit is not None:
            rows = rows[: stmt.limit]
        if plan.masks:
            rows = [apply_masks(r, plan.masks, key) for r in rows]
        if stmt.select_list is not None:
            cols = stmt.select_list
            rows = [{c: r.get(c) for c in cols} for r in rows]
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        if self.control is not None:
            self.control.record_sample(plan.projection, plan.route.value, elapsed_ms, self.clock())
        self.security.audit.emit(
            plan.principal.principal_id, "query", stmt.target, "allow", f"{plan.route.value} rows={len(rows)}"
        )
        return rows

    def query(self, stmt: Union[QueryStatement, str], principal: Principal) -> list[dict]:
        return self.execute(self.plan(stmt, principal))

    def subscribe(self, stmt: Union[QueryStatement, str], principal: Principal, capacity: Optional[int] = None) -> Subscription:
        if isinstance(stmt, str):
            stmt = parse(stmt)
        if stmt.kind != "subscribe":
            raise InvalidArgument("subscribe takes a SUBSCRIBE statement")
        plan = self.plan(stmt, principal)
        sub = Subscription(plan, capacity or self.subscription_capacity)
        # start from "now": fold what is already in the log before listening
        self.engine.catch_up(plan.projection)
        sub._detach = self.engine.add_listener(plan.projection, sub._on_change)
        return sub
