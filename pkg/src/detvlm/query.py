"""Conjunctive query language over indexed records.

Grammar:

    query  := clause ("&&" clause)*
    clause := ["!"] pred
    pred   := "exists(" id ")" | "state(" id ")=" label | "conf(" id ")>=" number

Whitespace between tokens is ignored; ids and labels are bare tokens. There
is deliberately no OR and no grouping: retrieval scenarios compose by
conjunction, which keeps the grammar total and easy to reason about.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .core import ComponentOntology, ImageResult, ValidationError


class QuerySyntaxError(ValidationError):
    """Parse failure carrying the byte offset and the expected tokens."""

    def __init__(self, offset: int, expected: Sequence[str], found: str) -> None:
        self.offset = offset
        self.expected = tuple(expected)
        self.found = found
        super().__init__(
            f"query syntax error at offset {offset}: expected "
            f"{' or '.join(self.expected)}, found {found!r}"
        )


class PredicateKind(Enum):
    EXISTS = "exists"
    STATE = "state"
    MIN_CONF = "conf"


@dataclass(frozen=True)
class Clause:
    negated: bool
    kind: PredicateKind
    component: str
    label: str | None = None
    threshold: float | None = None


@dataclass(frozen=True)
class QuerySpec:
    clauses: tuple[Clause, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "clauses", tuple(self.clauses))
        if not self.clauses:
            raise ValidationError("query must have at least one clause")


_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+")
_NUMBER_RE = re.compile(r"\d+(?:\.\d*)?|\.\d+")


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _fail(self, expected: Sequence[str]) -> QuerySyntaxError:
        found = self.text[self.pos : self.pos + 12] or "end of input"
        return QuerySyntaxError(self.pos, expected, found)

    def _literal(self, token: str) -> bool:
        self._skip_ws()
        if self.text.startswith(token, self.pos):
            self.pos += len(token)
            return True
        return False

    def _expect(self, token: str) -> None:
        if not self._literal(token):
            raise self._fail([repr(token)])

    def _bare_token(self, what: str) -> str:
        self._skip_ws()
        match = _TOKEN_RE.match(self.text, self.pos)
        if not match:
            raise self._fail([what])
        self.pos = match.end()
        return match.group()

    def _number(self) -> float:
        self._skip_ws()
        match = _NUMBER_RE.match(self.text, self.pos)
        if not match:
            raise self._fail(["number"])
        self.pos = match.end()
        return float(match.group())

    def _clause(self) -> Clause:
        negated = self._literal("!")
        self._skip_ws()
        if self._literal("exists"):
            self._expect("(")
            component = self._bare_token("component id")
            self._expect(")")
            return Clause(negated=negated, kind=PredicateKind.EXISTS, component=component)
        if self._literal("state"):
            self._expect("(")
            component = self._bare_token("component id")
            self._expect(")")
            self._expect("=")
            label = self._bare_token("state label")
            return Clause(
                negated=negated, kind=PredicateKind.STATE, component=component, label=label
            )
        if self._literal("conf"):
            self._expect("(")
            component = self._bare_token("component id")
            self._expect(")")
            self._expect(">=")
            threshold = self._number()
            return Clause(
                negated=negated,
                kind=PredicateKind.MIN_CONF,
                component=component,
                threshold=threshold,
            )
        raise self._fail(["exists(", "state(", "conf("])

    def parse(self) -> QuerySpec:
        clauses = [self._clause()]
        while True:
            self._skip_ws()
            if self.pos >= len(self.text):
                break
            self._expect("&&")
            clauses.append(self._clause())
        return QuerySpec(clauses=tuple(clauses))


def parse_query(text: str) -> QuerySpec:
    """Parse a query string, raising QuerySyntaxError with position and
    expectations on malformed input."""
    return _Parser(text).parse()


def validate_query(spec: QuerySpec, ontology: ComponentOntology) -> None:
    """Reject queries that reference components outside the ontology."""
    for clause in spec.clauses:
        if clause.component not in ontology:
            raise ValidationError(f"query references unknown component {clause.component!r}")


def _clause_holds(clause: Clause, result: ImageResult) -> bool:
    record = result.record_for(clause.component)
    if record is None:
        value = False
    elif clause.kind is PredicateKind.EXISTS:
        value = record.exists == 1
    elif clause.kind is PredicateKind.STATE:
        value = record.exists == 1 and record.state == clause.label
    else:
        value = record.confidence >= (clause.threshold or 0.0)
    return not value if clause.negated else value


def evaluate_query(spec: QuerySpec, results: Iterable[ImageResult]) -> list[str]:
    """Return the ids of images satisfying every clause, in input order."""
    return [
        result.image_id
        for result in results
        if all(_clause_holds(clause, result) for clause in spec.clauses)
    ]
