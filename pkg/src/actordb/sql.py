"""SQL-subset language: tokenizer, recursive-descent parser, printer, predicates.

Grammar::

    statement  = (select | subscribe) [";"]
    select     = SELECT selectList FROM qname [temporal] [WHERE expr] [LIMIT int]
    subscribe  = SUBSCRIBE TO qname [WHERE expr]
    temporal   = FOR TIMESTAMP AS OF 'rfc3339'
    selectList = "*" | ident {"," ident}
    expr       = andExpr {OR andExpr}
    andExpr    = notExpr {AND notExpr}
    notExpr    = [NOT] primary
    primary    = "(" expr ")" | comparison | TRUE | FALSE
    comparison = operand compOp operand
    operand    = ident | principal.ident | literal

Predicates compile to plain closures. A comparison whose operand is null,
absent, or of a mismatched type is false rather than an error.
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass
from typing import Any, Callable, Optional, Union

from actordb.canonical import format_timestamp, parse_timestamp
from actordb.errors import BadTimestamp, ExpressionError, LexError, ParseError

KEYWORDS = frozenset(
    "SELECT FROM WHERE SUBSCRIBE TO FOR TIMESTAMP AS OF AND OR NOT TRUE FALSE LIMIT".split()
)
COMPARISON_OPS = ("=", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True)
class Token:
    kind: str  # KW, IDENT, STRING, NUMBER, OP, SYM
    value: Any
    pos: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|!=|<>|=|<|>)
  | (?P<sym>[*,.();-])
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos] == "'":
            start = pos
            pos += 1
            buf = []
            while True:
                end = text.find("'", pos)
                if end < 0:
                    raise LexError("unterminated string", start)
                buf.append(text[pos:end])
                if end + 1 < n and text[end + 1] == "'":
                    buf.append("'")
                    pos = end + 2
                    continue
                pos = end + 1
                break
            tokens.append(Token("STRING", "".join(buf), start))
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise LexError(f"unrecognized character {text[pos]!r}", pos)
        kind = m.lastgroup
        value = m.group()
        if kind == "number":
            num = float(value) if any(c in value for c in ".eE") else int(value)
            tokens.append(Token("NUMBER", num, pos))
        elif kind == "ident":
            upper = value.upper()
            if upper in KEYWORDS:
                tokens.append(Token("KW", upper, pos))
            else:
                tokens.append(Token("IDENT", value, pos))
        elif kind == "op":
            tokens.append(Token("OP", "!=" if value == "<>" else value, pos))
        elif kind == "sym":
            tokens.append(Token("SYM", value, pos))
        pos = m.end()
    return tokens


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Column:
    name: str


@dataclass(frozen=True)
class PrincipalAttr:
    attr: str


@dataclass(frozen=True)
class Literal:
    value: Union[str, int, float, bool]

    def __eq__(self, other):
        # keep 1, 1.0 and True distinct
        return isinstance(other, Literal) and type(self.value) is type(other.value) and self.value == other.value

    def __hash__(self):
        return hash((type(self.value), self.value))


Operand = Union[Column, PrincipalAttr, Literal]


@dataclass(frozen=True)
class Comparison:
    left: Operand
    op: str
    right: Operand


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: Any


@dataclass(frozen=True)
class BoolLiteral:
    value: bool


Expression = Union[Comparison, And, Or, Not, BoolLiteral]
TRUE = BoolLiteral(True)
FALSE = BoolLiteral(False)


@dataclass(frozen=True)
class QueryStatement:
    kind: str  # "select" | "subscribe"
    schema: str
    name: str
    select_list: Optional[tuple[str, ...]] = None  # None means "*"
    as_of: Optional[int] = None  # epoch ms
    predicate: Optional[Expression] = None
    limit: Optional[int] = None

    @property
    def target(self) -> str:
        return f"{self.schema}.{self.name}"


def conjoin(*exprs: Optional[Expression]) -> Expression:
    items = [e for e in exprs if e is not None and e != TRUE]
    if any(e == FALSE for e in items):
        return FALSE
    if not items:
        return TRUE
    return items[0] if len(items) == 1 else And(tuple(items))


def disjoin(*exprs: Expression) -> Expression:
    items = [e for e in exprs if e != FALSE]
    if any(e == TRUE for e in items):
        return TRUE
    if not items:
        return FALSE
    return items[0] if len(items) == 1 else Or(tuple(items))


def columns_of(expr: Optional[Expression]) -> set[str]:
    out: set[str] = set()

    def walk(e):
        if isinstance(e, Comparison):
            for side in (e.left, e.right):
                if isinstance(side, Column):
                    out.add(side.name)
        elif isinstance(e, (And, Or)):
            for item in e.items:
                walk(item)
        elif isinstance(e, Not):
            walk(e.item)

    if expr is not None:
        walk(expr)
    return out


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[Token], text_len: int = 0):
        self.tokens = tokens
        self.i = 0
        self.end_pos = tokens[-1].pos + 1 if tokens else text_len

    def peek(self, offset: int = 0) -> Optional[Token]:
        j = self.i + offset
        return self.tokens[j] if j < len(self.tokens) else None

    def pos(self) -> int:
        tok = self.peek()
        return tok.pos if tok else self.end_pos

    def fail(self, message: str, *expected: str):
        raise ParseError(message, self.pos(), tuple(expected))

    def at_kw(self, *words: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "KW" and tok.value in words

    def at_sym(self, sym: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "SYM" and tok.value == sym

    def expect_kw(self, word: str) -> Token:
        if not self.at_kw(word):
            self.fail(f"expected {word}", word)
        self.i += 1
        return self.tokens[self.i - 1]

    def expect_sym(self, sym: str) -> Token:
        if not self.at_sym(sym):
            self.fail(f"expected {sym!r}", sym)
        self.i += 1
        return self.tokens[self.i - 1]

    def ident(self) -> str:
        tok = self.peek()
        if tok is None or tok.kind != "IDENT":
            self.fail("expected identifier", "identifier")
        self.i += 1
        return tok.value

    # statements

    def statement(self) -> QueryStatement:
        if self.at_kw("SELECT"):
            stmt = self.select()
        elif self.at_kw("SUBSCRIBE"):
            stmt = self.subscribe()
        else:
            self.fail("expected statement", "SELECT", "SUBSCRIBE")
        if self.at_sym(";"):
            self.i += 1
        if self.peek() is not None:
            self.fail("unexpected trailing input", "end of input")
        return stmt

    def select(self) -> QueryStatement:
        self.expect_kw("SELECT")
        if self.at_sym("*"):
            self.i += 1
            select_list = None
        else:
            tok = self.peek()
            if tok is None or tok.kind != "IDENT":
                self.fail("empty select list", "*", "identifier")
            names = [self.ident()]
            while self.at_sym(","):
                self.i += 1
                names.append(self.ident())
            select_list = tuple(names)
        self.expect_kw("FROM")
        schema, name = self.qname()
        as_of = None
        if self.at_kw("FOR"):
            self.i += 1
            self.expect_kw("TIMESTAMP")
            self.expect_kw("AS")
            self.expect_kw("OF")
            tok = self.peek()
            if tok is None or tok.kind != "STRING":
                self.fail("expected timestamp string", "string literal")
            self.i += 1
            try:
                as_of = parse_timestamp(tok.value)
            except ValueError as exc:
                raise BadTimestamp(f"bad AS OF timestamp {tok.value!r}: {exc}") from None
        predicate = None
        if self.at_kw("WHERE"):
            self.i += 1
            predicate = self.expr()
        limit = None
        if self.at_kw("LIMIT"):
            self.i += 1
            tok = self.peek()
            if tok is None or tok.kind != "NUMBER" or not isinstance(tok.value, int) or tok.value < 1:
                self.fail("LIMIT needs a positive integer", "positive integer")
            self.i += 1
            limit = tok.value
        return QueryStatement("select", schema, name, select_list, as_of, predicate, limit)

    def subscribe(self) -> QueryStatement:
        self.expect_kw("SUBSCRIBE")
        self.expect_kw("TO")
        schema, name = self.qname()
        predicate = None
        if self.at_kw("WHERE"):
            self.i += 1
            predicate = self.expr()
        return QueryStatement("subscribe", schema, name, predicate=predicate)

    def qname(self) -> tuple[str, str]:
        schema = self.ident()
        self.expect_sym(".")
        return schema, self.ident()

    # expressions

    def expr(self) -> Expression:
        items = [self.and_expr()]
        while self.at_kw("OR"):
            self.i += 1
            items.append(self.and_expr())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def and_expr(self) -> Expression:
        items = [self.not_expr()]
        while self.at_kw("AND"):
            self.i += 1
            items.append(self.not_expr())
        return items[0] if len(items) == 1 else And(tuple(items))

    def not_expr(self) -> Expression:
        if self.at_kw("NOT"):
            self.i += 1
            return Not(self.primary())
        return self.primary()

    def primary(self) -> Expression:
        if self.at_sym("("):
            self.i += 1
            e = self.expr()
            self.expect_sym(")")
            return e
        if self.at_kw("TRUE", "FALSE"):
            nxt = self.peek(1)
            if nxt is None or nxt.kind != "OP":
                value = self.peek().value == "TRUE"
                self.i += 1
                return BoolLiteral(value)
        return self.comparison()

    def comparison(self) -> Comparison:
        left = self.operand()
        tok = self.peek()
        if tok is None or tok.kind != "OP":
            self.fail("expected comparison operator", *COMPARISON_OPS)
        self.i += 1
        right = self.operand()
        return Comparison(left, tok.value, right)

    def operand(self) -> Operand:
        tok = self.peek()
        expected = ("identifier", "literal", "(", "NOT", "TRUE", "FALSE")
        if tok is None:
            self.fail("unexpected end of input", *expected)
        if tok.kind == "IDENT":
            self.i += 1
            if self.at_sym("."):
                if tok.value != "principal":
                    self.fail("only principal.<attr> may be qualified", "comparison operator")
                self.i += 1
                return PrincipalAttr(self.ident())
            return Column(tok.value)
        if tok.kind == "STRING":
            self.i += 1
            return Literal(tok.value)
        if tok.kind == "NUMBER":
            self.i += 1
            return Literal(tok.value)
        if tok.kind == "SYM" and tok.value == "-":
            nxt = self.peek(1)
            if nxt is not None and nxt.kind == "NUMBER" and nxt.pos == tok.pos + 1:
                self.i += 2
                return Literal(-nxt.value)
        if tok.kind == "KW" and tok.value in ("TRUE", "FALSE"):
            self.i += 1
            return Literal(tok.value == "TRUE")
        self.fail(f"unexpected {tok.value!r}", *expected)


def parse(source: Union[str, list[Token]]) -> QueryStatement:
    """Parse statement text (or an already tokenized list)."""
    if isinstance(source, str):
        return _Parser(tokenize(source), len(source)).statement()
    return _Parser(source).statement()


def parse_expression(text: str) -> Expression:
    try:
        tokens = tokenize(text)
        p = _Parser(tokens, len(text))
        if not tokens:
            raise ParseError("empty expression", 0, ("expression",))
        e = p.expr()
        if p.peek() is not None:
            p.fail("unexpected trailing input", "end of input")
        return e
    except (LexError, ParseError) as exc:
        raise ExpressionError(f"bad expression {text!r}: {exc}") from None


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def format_literal(value) -> str:
    if isinstance(value, bool):
        return "TRUE" if value else "FALSE"
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    return repr(value)


def _fmt_operand(o: Operand) -> str:
    if isinstance(o, Column):
        return o.name
    if isinstance(o, PrincipalAttr):
        return f"principal.{o.attr}"
    return format_literal(o.value)


def format_expression(e: Expression) -> str:
    if isinstance(e, Comparison):
        return f"{_fmt_operand(e.left)} {e.op} {_fmt_operand(e.right)}"
    if isinstance(e, BoolLiteral):
        return "TRUE" if e.value else "FALSE"
    if isinstance(e, Not):
        inner = format_expression(e.item)
        if isinstance(e.item, (Comparison, BoolLiteral)):
            return f"NOT {inner}"
        return f"NOT ({inner})"
    if isinstance(e, And):
        return " AND ".join(
            f"({format_expression(i)})" if isinstance(i, (And, Or)) else format_expression(i) for i in e.items
        )
    if isinstance(e, Or):
        return " OR ".join(f"({format_expression(i)})" if isinstance(i, Or) else format_expression(i) for i in e.items)
    raise ExpressionError(f"not an expression: {e!r}")


def format_statement(stmt: QueryStatement) -> str:
    if stmt.kind == "subscribe":
        out = f"SUBSCRIBE TO {stmt.target}"
    else:
        cols = "*" if stmt.select_list is None else ", ".join(stmt.select_list)
        out = f"SELECT {cols} FROM {stmt.target}"
        if stmt.as_of is not None:
            out += f" FOR TIMESTAMP AS OF '{format_timestamp(stmt.as_of)}'"
    if stmt.predicate is not None:
        out += f" WHERE {format_expression(stmt.predicate)}"
    if stmt.limit is not None:
        out += f" LIMIT {stmt.limit}"
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_OPS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


def principal_value(principal, attr: str):
    if principal is None:
        return None
    attrs = principal.attributes
    if attr in attrs:
        return attrs[attr]
    if attr in ("sub", "id", "principal_id"):
        return principal.principal_id
    return None


def compare(a, op: str, b) -> bool:
    """Two-valued comparison: unknown or mismatched operands give False."""
    if a is None or b is None:
        return False
    ta, tb = type(a), type(b)
    if ta is bool or tb is bool:
        if ta is not tb or op not in ("=", "!="):
            return False
    elif ta is str or tb is str:
        if ta is not tb:
            return False
    elif ta not in (int, float) or tb not in (int, float):
        return False
    return _OPS[op](a, b)


def compile_predicate(expr: Optional[Expression], principal=None) -> Callable[[dict], bool]:
    """Compile an expression into ``row -> bool``; principal refs are bound now."""
    if expr is None:
        return lambda row: True
    if isinstance(expr, BoolLiteral):
        v = expr.value
        return lambda row: v
    if isinstance(expr, Comparison):
        op = expr.op
        if op not in _OPS:
            raise ExpressionError(f"unknown operator {op!r}")
        left, right = expr.left, expr.right
        if isinstance(left, PrincipalAttr):
            left = Literal(principal_value(principal, left.attr))
        if isinstance(right, PrincipalAttr):
            right = Literal(principal_value(principal, right.attr))
        if isinstance(left, Column) and isinstance(right, Literal):
            name, lit = left.name, right.value
            return lambda row: compare(row.get(name), op, lit)
        if isinstance(left, Literal) and isinstance(right, Column):
            name, lit = right.name, left.value
            return lambda row: compare(lit, op, row.get(name))
        if isinstance(left, Column) and isinstance(right, Column):
            a, b = left.name, right.name
            return lambda row: compare(row.get(a), op, row.get(b))
        result = compare(left.value, op, right.value)
        return lambda row: result
    if isinstance(expr, And):
        parts = [compile_predicate(i, principal) for i in expr.items]
        return lambda row: all(p(row) for p in parts)
    if isinstance(expr, Or):
        parts = [compile_predicate(i, principal) for i in expr.items]
        return lambda row: any(p(row) for p in parts)
    if isinstance(expr, Not):
        inner = compile_predicate(expr.item, principal)
        return lambda row: not inner(row)
    raise ExpressionError(f"not an expression: {expr!r}")


def evaluate(expr: Optional[Expression], row: dict, principal=None) -> bool:
    return compile_predicate(expr, principal)(row)


def bind_principal(expr: Optional[Expression], principal) -> Optional[Expression]:
    """Replace ``principal.<attr>`` references with literals (absent attrs stay unknown)."""
    if expr is None:
        return None
    if isinstance(expr, Comparison):
        sides = []
        for side in (expr.left, expr.right):
            if isinstance(side, PrincipalAttr):
                value = principal_value(principal, side.attr)
                if value is None:
                    return FALSE
                side = Literal(value)
            sides.append(side)
        return Comparison(sides[0], expr.op, sides[1])
    if isinstance(expr, And):
        return And(tuple(bind_principal(i, principal) for i in expr.items))
    if isinstance(expr, Or):
        return Or(tuple(bind_principal(i, principal) for i in expr.items))
    if isinstance(expr, Not):
        return Not(bind_principal(expr.item, principal))
    return expr


def key_lookup(expr: Optional[Expression], key_column: str):
    """If ``expr`` pins ``key_column`` to a literal via a top-level conjunct, return it.

    Returns ``(found, value)``; used for point-lookup fast paths.
    """
    candidates = [expr] if isinstance(expr, Comparison) else list(expr.items) if isinstance(expr, And) else []
    for c in candidates:
        if isinstance(c, Comparison) and c.op == "=":
            if isinstance(c.left, Column) and c.left.name == key_column and isinstance(c.right, Literal):
                return True, c.right.value
            if isinstance(c.right, Column) and c.right.name == key_column and isinstance(c.left, Literal):
                return True, c.left.value
    return False, None
