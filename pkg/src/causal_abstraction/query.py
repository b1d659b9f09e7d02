"""Counterfactual queries and their text grammar.

A query is a conjunction of potential-outcome terms, optionally conditioned
on another conjunction::

    P(Y_{A=1,B=1}=1)
    P(Y=1 | A=1, B=1)
    P(Y_{X=0}=1 | X=1, Y=1)

Each event in the text becomes one :class:`Term` with a single outcome
variable. Terms sharing an intervention are evaluated in the same world.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

__all__ = [
    "Term",
    "CtfQuery",
    "QueryParseError",
    "parse_query",
    "format_query",
    "coerce_value",
]

_NAME = re.compile(r"[A-Za-z][A-Za-z0-9]*(?:_[A-Za-z0-9]+)*")
_VALUE = re.compile(r"-?[A-Za-z0-9_.]+")
_INT = re.compile(r"-?\d+")


class QueryParseError(ValueError):
    """Raised when query text does not match the grammar."""

    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at position {pos}: {text!r}")
        self.text = text
        self.pos = pos


def coerce_value(token: Any) -> Any:
    """Turn integer-looking strings into ints; leave everything else alone."""
    if isinstance(token, str) and _INT.fullmatch(token):
        return int(token)
    return token


def _pairs(items: Mapping[str, Any] | Iterable[tuple[str, Any]]) -> tuple:
    if isinstance(items, Mapping):
        items = items.items()
    return tuple((str(k), v) for k, v in items)


@dataclass(frozen=True)
class Term:
    """Outcome assignment ``outcome`` in the world where ``intervention`` holds."""

    outcome: tuple
    intervention: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "outcome", _pairs(self.outcome))
        object.__setattr__(self, "intervention", _pairs(self.intervention))
        if not self.outcome:
            raise ValueError("term needs at least one outcome variable")
        ys = [k for k, _ in self.outcome]
        xs = [k for k, _ in self.intervention]
        if len(set(ys)) != len(ys) or len(set(xs)) != len(xs):
            raise ValueError(f"repeated variable in term {self}")
        overlap = set(ys) & set(xs)
        if overlap:
            raise ValueError(f"outcome and intervention overlap on {sorted(overlap)}")

    @classmethod
    def of(cls, outcome, intervention=()) -> "Term":
        return cls(_pairs(outcome), _pairs(intervention))

    @property
    def outcome_vars(self) -> frozenset:
        return frozenset(k for k, _ in self.outcome)

    @property
    def intervention_vars(self) -> frozenset:
        return frozenset(k for k, _ in self.intervention)

    @property
    def world(self) -> frozenset:
        """Hashable key identifying the intervention (the world)."""
        return frozenset(self.intervention)


@dataclass(frozen=True)
class CtfQuery:
    """``P(terms | given)``; an empty ``given`` means unconditional."""

    terms: tuple = ()
    given: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "given", tuple(self.given))

    @property
    def is_conditional(self) -> bool:
        return bool(self.given)

    @property
    def joint(self) -> "CtfQuery":
        """The unconditional conjunction of ``terms`` and ``given``."""
        return CtfQuery(self.terms + self.given)

    @property
    def variables(self) -> frozenset:
        out: set = set()
        for t in self.terms + self.given:
            out |= t.outcome_vars | t.intervention_vars
        return frozenset(out)

    def __str__(self) -> str:
        return format_query(self)


def _format_event(name: str, value: Any, intervention: tuple) -> str:
    sub = ""
    if intervention:
        sub = "_{" + ",".join(f"{k}={v}" for k, v in intervention) + "}"
    return f"{name}{sub}={value}"


def _format_terms(terms: Iterable[Term]) -> str:
    return ", ".join(
        _format_event(y, v, t.intervention) for t in terms for y, v in t.outcome
    )


def format_query(query: CtfQuery) -> str:
    """Canonical text form; ``parse_query(format_query(q))`` reproduces it."""
    body = _format_terms(query.terms)
    if query.given:
        body += " | " + _format_terms(query.given)
    return f"P({body})"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str):
        raise QueryParseError(message, self.text, self.pos)

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self, literal: str) -> bool:
        self.skip()
        return self.text.startswith(literal, self.pos)

    def expect(self, literal: str):
        if not self.peek(literal):
            self.error(f"expected {literal!r}")
        self.pos += len(literal)

    def match(self, pattern: re.Pattern, what: str) -> str:
        self.skip()
        m = pattern.match(self.text, self.pos)
        if not m:
            self.error(f"expected {what}")
        self.pos = m.end()
        return m.group(0)

    def assignment(self) -> tuple[str, Any]:
        name = self.match(_NAME, "variable name")
        self.expect("=")
        return name, coerce_value(self.match(_VALUE, "value"))

    def event(self) -> Term:
        name = self.match(_NAME, "variable name")
        intervention = []
        if self.text.startswith("_{", self.pos):
            self.pos += 2
            intervention.append(self.assignment())
            while self.peek(","):
                self.pos += 1
                intervention.append(self.assignment())
            self.expect("}")
        self.expect("=")
        value = coerce_value(self.match(_VALUE, "value"))
        try:
            return Term(((name, value),), tuple(intervention))
        except ValueError as exc:
            self.error(str(exc))

    def events(self) -> list[Term]:
        out = [self.event()]
        while self.peek(","):
            self.pos += 1
            out.append(self.event())
        return out

    def query(self) -> CtfQuery:
        self.expect("P(")
        terms: list[Term] = []
        given: list[Term] = []
        if not self.peek(")"):
            terms = self.events()
            if self.peek("|"):
                self.pos += 1
                given = self.events()
        self.expect(")")
        self.skip()
        if self.pos != len(self.text):
            self.error("trailing input")
        return CtfQuery(tuple(terms), tuple(given))


def parse_query(text: str) -> CtfQuery:
    """Parse query text; raises :class:`QueryParseError` with the offset."""
    return _Parser(text).query()
