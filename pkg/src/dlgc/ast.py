"""Abstract syntax of programs and class libraries.

Every node is a frozen dataclass.  Source spans ride along on the nodes the
parser builds but never take part in equality, so a reparsed program compares
equal to the one that was printed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import DlgcError, SignatureMismatch
from .types import TypeExpr, Value


class InvalidProgram(DlgcError):
    pass


@dataclass(frozen=True)
class Span:
    line: int = 1
    col: int = 1
    start: int = 0
    end: int = 0

    def __str__(self):
        return f"{self.line}:{self.col}"


def _span():
    return field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------------------
# References
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FunctionRef:
    cls: str
    name: str
    span: Optional[Span] = _span()

    def __str__(self):
        return f"@{self.cls}.{self.name}"


@dataclass(frozen=True)
class ActRef:
    namespace: str
    name: str
    span: Optional[Span] = _span()

    def __str__(self):
        return f"@{self.namespace}.{self.name}"


@dataclass(frozen=True)
class VarRef:
    """Output field of the statement's query, passed to an action parameter."""
    name: str


@dataclass(frozen=True)
class EnvRef:
    """``$here`` or ``$now``, bound from the execution environment."""
    name: str


class _MissingType:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "Missing"

    def __reduce__(self):
        return (_MissingType, ())


Missing = _MissingType()

Operand = Union[Value, VarRef, EnvRef, _MissingType]


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

class FilterExpr:
    pass


@dataclass(frozen=True)
class BoolFilter(FilterExpr):
    value: bool


TRUE = BoolFilter(True)
FALSE = BoolFilter(False)


@dataclass(frozen=True)
class And(FilterExpr):
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Or(FilterExpr):
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Not(FilterExpr):
    child: FilterExpr


ATOM_OPS = ("==", ">=", "<=", "contains", "in_array", "substr")
SUBQUERY_OPS = ("==", ">=", "<=", "contains")


@dataclass(frozen=True)
class Atom(FilterExpr):
    field: str
    op: str
    rhs: Operand
    span: Optional[Span] = _span()

    def __post_init__(self):
        if self.op not in ATOM_OPS:
            raise InvalidProgram(f"unknown filter operator {self.op!r}")


@dataclass(frozen=True)
class DontCare(FilterExpr):
    field: str
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Subquery(FilterExpr):
    """True iff some row of ``query`` has ``inner_field`` related to ``field``.

    For ``contains`` the inner field is an array that must contain the outer
    field's value."""

    field: str
    op: str
    query: "Query"
    inner_field: str
    span: Optional[Span] = _span()

    def __post_init__(self):
        if self.op not in SUBQUERY_OPS:
            raise InvalidProgram(f"unknown subquery operator {self.op!r}")


# ---------------------------------------------------------------------------
# Queries, actions, statements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Distance:
    """Computed field: great-circle distance from a Location field."""
    field: str
    origin: Union[Value, EnvRef]


@dataclass(frozen=True)
class SortSpec:
    field: str
    direction: str = "asc"

    def __post_init__(self):
        if self.direction not in ("asc", "desc"):
            raise InvalidProgram(f"bad sort direction {self.direction!r}")


@dataclass(frozen=True)
class SliceSpec:
    """1-based start, row count."""
    start: int
    count: int


AGGREGATE_OPS = ("count", "min", "max", "sum", "avg")


@dataclass(frozen=True)
class Aggregate:
    op: str
    field: Optional[str] = None

    def __post_init__(self):
        if self.op not in AGGREGATE_OPS:
            raise InvalidProgram(f"unknown aggregate {self.op!r}")
        if (self.op == "count") != (self.field is None):
            raise InvalidProgram("count takes no field; other aggregates need one")

    @property
    def output(self):
        return "count" if self.op == "count" else self.field


@dataclass(frozen=True)
class Query:
    base: FunctionRef
    filter: FilterExpr = TRUE
    computed: tuple = ()            # ((name, Distance), ...)
    sort: Optional[SortSpec] = None
    slice: Optional[SliceSpec] = None
    aggregate: Optional[Aggregate] = None
    projection: Optional[tuple] = None
    span: Optional[Span] = _span()

    def __post_init__(self):
        object.__setattr__(self, "computed", tuple(self.computed))
        if self.projection is not None:
            object.__setattr__(self, "projection", tuple(self.projection))

    def computed_map(self):
        return dict(self.computed)


@dataclass(frozen=True)
class Action:
    target: FunctionRef
    args: tuple = ()                # ((name, Operand), ...) in source order
    span: Optional[Span] = _span()

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(tuple(a) for a in self.args))

    def arg(self, name, default=None):
        for k, v in self.args:
            if k == name:
                return v
        return default

    def arg_names(self):
        return [k for k, _ in self.args]


@dataclass(frozen=True)
class Statement:
    query: Optional[Query] = None
    action: Optional[Action] = None
    span: Optional[Span] = _span()

    @property
    def domain(self):
        target = self.action.target if self.action else self.query.base
        return target.cls


@dataclass(frozen=True)
class StreamStatement:
    monitor: Query
    action: Action
    span: Optional[Span] = _span()

    @property
    def query(self):
        return self.monitor

    @property
    def domain(self):
        return self.action.target.cls


ZERO_STATEMENT_ACTS = {"Greet", "Cancel", "ThankYou", "Confirm", "Reject"}
TRANSACTION_ACTS = ("Greet", "Execute", "Cancel", "ThankYou", "Confirm", "Reject")


@dataclass(frozen=True)
class Program:
    act: ActRef
    statements: tuple = ()
    span: Optional[Span] = _span()

    def __post_init__(self):
        object.__setattr__(self, "statements", tuple(self.statements))


# ---------------------------------------------------------------------------
# Class library
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Param:
    direction: str                  # "in" | "out"
    name: str
    type: TypeExpr
    required: bool = True
    annotations: tuple = ()         # (("_canonical", "..."), ("required", False), ...)

    def annotation(self, key, default=None):
        return dict(self.annotations).get(key, default)


@dataclass(frozen=True)
class FunctionSig:
    kind: str                       # "query" | "action"
    name: str
    params: tuple = ()
    confirmation: bool = False
    annotations: tuple = ()
    span: Optional[Span] = _span()

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))

    def annotation(self, key, default=None):
        return dict(self.annotations).get(key, default)

    def param(self, name) -> Optional[Param]:
        for p in self.params:
            if p.name == name:
                return p
        return None

    @property
    def in_params(self):
        return [p for p in self.params if p.direction == "in"]

    @property
    def out_params(self):
        return [p for p in self.params if p.direction == "out"]


@dataclass(frozen=True)
class LoaderBinding:
    kind: str
    args: tuple = ()

    def arg(self, name, default=None):
        return dict(self.args).get(name, default)


@dataclass(frozen=True)
class ClassDef:
    name: str
    abstract: bool = False
    extends: tuple = ()
    entities: tuple = ()
    functions: tuple = ()
    loader: Optional[LoaderBinding] = None
    annotations: tuple = ()
    span: Optional[Span] = _span()

    def __post_init__(self):
        for f in ("extends", "entities", "functions"):
            object.__setattr__(self, f, tuple(getattr(self, f)))

    def function(self, name) -> Optional[FunctionSig]:
        for f in self.functions:
            if f.name == name:
                return f
        return None

    @property
    def queries(self):
        return [f for f in self.functions if f.kind == "query"]

    @property
    def actions(self):
        return [f for f in self.functions if f.kind == "action"]


@dataclass(frozen=True)
class ActDecl:
    """``dialogue acts @Ns { A; B; }`` block declaring agent-specific acts."""
    namespace: str
    names: tuple = ()
    span: Optional[Span] = _span()


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def free_variables(stmt) -> set:
    if stmt.action is None:
        return set()
    return {v.name for _, v in stmt.action.args if isinstance(v, VarRef)}


def missing_params(stmt, sig: FunctionSig) -> list:
    """Required in-params of ``sig`` left Missing (or absent) in the action."""
    if stmt.action is None or stmt.action.target.name != sig.name or sig.kind != "action":
        raise SignatureMismatch(f"statement does not invoke {sig.name}")
    given = dict(stmt.action.args)
    return [p.name for p in sig.in_params
            if p.required and given.get(p.name, Missing) is Missing]


def has_missing(stmt) -> bool:
    return stmt.action is not None and any(v is Missing for _, v in stmt.action.args)


def walk_filter(f: FilterExpr):
    """Pre-order traversal of a filter tree (not descending into subqueries)."""
    yield f
    if isinstance(f, (And, Or)):
        for c in f.children:
            yield from walk_filter(c)
    elif isinstance(f, Not):
        yield from walk_filter(f.child)


def filter_fields(f: FilterExpr) -> set:
    out = set()
    for node in walk_filter(f):
        if isinstance(node, (Atom, DontCare, Subquery)):
            out.add(node.field)
    return out


def _validate_filter(f):
    for node in walk_filter(f):
        if isinstance(node, (And, Or)) and len(node.children) < 2:
            raise InvalidProgram(f"{type(node).__name__} needs at least two operands")
        if isinstance(node, Subquery):
            _validate_query(node.query)


def _validate_query(q: Query):
    _validate_filter(q.filter)
    names = [n for n, _ in q.computed]
    if len(set(names)) != len(names):
        raise InvalidProgram("duplicate computed field")
    if q.slice is not None and (q.slice.start < 1 or q.slice.count < 1):
        raise InvalidProgram("slice start and count must be >= 1")
    if q.projection is not None:
        if not q.projection or len(set(q.projection)) != len(q.projection):
            raise InvalidProgram("projection fields must be unique and non-empty")


def validate(program: Program) -> Program:
    """Check structural invariants; returns the program unchanged."""
    act = program.act
    if act.namespace == "Transaction":
        if act.name in ZERO_STATEMENT_ACTS and program.statements:
            raise InvalidProgram(f"{act} carries no statements")
        if act.name == "Execute" and not program.statements:
            raise InvalidProgram(f"{act} needs at least one statement")
    for s in program.statements:
        if isinstance(s, StreamStatement):
            if s.monitor.aggregate is not None:
                raise InvalidProgram("monitored query cannot aggregate")
            _validate_query(s.monitor)
            continue
        if s.query is None and s.action is None:
            raise InvalidProgram("statement needs a query or an action")
        if s.query is not None:
            _validate_query(s.query)
        if s.action is not None:
            if s.query is None and free_variables(s):
                raise InvalidProgram("variable reference without a query")
    return program


def equal_modulo_canonical(a: Program, b: Program) -> bool:
    from .canonical import canonicalize_program
    from .syntax import print_program

    return print_program(canonicalize_program(a)) == print_program(canonicalize_program(b))
