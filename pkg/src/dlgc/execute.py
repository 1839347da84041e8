"""Executable semantics of statements.

Query pipeline: base rows (id order) -> computed fields -> filter -> stable
sort (nulls last, ties by id) -> clamped 1-based slice -> aggregate ->
projection (``id`` kept).  An atom whose field is null is false, so its
negation is true.  ``q => a`` invokes the action once per result row.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import ast as A
from . import types as T
from .errors import (
    BackendFailure,
    EmptyAggregate,
    MissingParameter,
    NonConcreteClass,
)
from .skills import ActionOutcome, encode_record
from .syntax import print_value

DEFAULT_HERE = T.Location(37.4275, -122.1697, "here")
DEFAULT_NOW = T.Date.parse("2024-05-01")


@dataclass(frozen=True)
class Env:
    here: T.Location = DEFAULT_HERE
    now: T.Date = DEFAULT_NOW
    seed: int = 0

    def lookup(self, ref: A.EnvRef):
        return {"here": self.here, "now": self.now}[ref.name]


@dataclass
class ExecutionResult:
    statement: object
    rows: Optional[list] = None          # query path
    outcomes: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.rows) if self.rows is not None else 0

    @property
    def failed(self):
        return any(not o.success for o in self.outcomes)

    def to_json_lines(self):
        out = []
        for r in self.rows or []:
            out.append(json.dumps({"row": encode_record(r)}, sort_keys=True))
        for o in self.outcomes:
            out.append(json.dumps({"outcome": o.to_json()}, sort_keys=True))
        return out


def _backends(registry, cls_name):
    cls = registry.classes.get(cls_name)
    if cls is None or not cls.concrete:
        raise NonConcreteClass(f"@{cls_name} has no implementation")
    b = registry.backends.get(cls_name)
    if b is None or b[0] is None:
        raise NonConcreteClass(f"@{cls_name} is not loaded")
    return b


def _id_key(row):
    v = row.get("id")
    if isinstance(v, T.Entity):
        return v.id
    return "" if v is None else print_value(v)


def _resolve(v, env):
    return env.lookup(v) if isinstance(v, A.EnvRef) else v


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

class _Evaluator:
    def __init__(self, registry, env):
        self.registry = registry
        self.env = env
        self._subcache = {}

    def atom(self, f: A.Atom, row):
        v = row.get(f.field)
        if v is None:
            return False
        rhs = _resolve(f.rhs, self.env)
        op = f.op
        if op == "==":
            return T.values_equal(v, rhs)
        if op in (">=", "<="):
            return T.compare_values(v, rhs, op)
        if op == "contains":
            return any(T.values_equal(x, rhs) for x in v.values)
        if op == "in_array":
            return any(T.values_equal(v, x) for x in rhs.values)
        if op == "substr":
            return T.normalize_text(rhs.value) in T.normalize_text(v.value)
        raise ValueError(op)

    def subquery(self, f: A.Subquery, row):
        v = row.get(f.field)
        if v is None:
            return False
        key = id(f.query)
        if key not in self._subcache:
            self._subcache[key] = (f.query, execute_query(f.query, self.registry, self.env))
        inner = self._subcache[key][1]
        for r in inner:
            w = r.get(f.inner_field)
            if w is None:
                continue
            if f.op == "contains":
                if any(T.values_equal(x, v) for x in w.values):
                    return True
            elif T.compare_values(w, v, f.op):
                return True
        return False

    def test(self, f, row) -> bool:
        if isinstance(f, A.BoolFilter):
            return f.value
        if isinstance(f, A.And):
            return all(self.test(c, row) for c in f.children)
        if isinstance(f, A.Or):
            return any(self.test(c, row) for c in f.children)
        if isinstance(f, A.Not):
            return not self.test(f.child, row)
        if isinstance(f, A.DontCare):
            return True
        if isinstance(f, A.Subquery):
            return self.subquery(f, row)
        return self.atom(f, row)


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def _sort(rows, spec: A.SortSpec):
    sign = 1 if spec.direction == "asc" else -1

    def cmp(a, b):
        x, y = a.get(spec.field), b.get(spec.field)
        if x is None or y is None:
            if x is None and y is None:
                return 0
            return 1 if x is None else -1
        return sign * T.sort_key_cmp(x, y)

    def full(a, b):
        c = cmp(a[1], b[1])
        if c:
            return c
        ka, kb = _id_key(a[1]), _id_key(b[1])
        if ka != kb:
            return -1 if ka < kb else 1
        return a[0] - b[0]

    idx = sorted(enumerate(rows), key=functools.cmp_to_key(full))
    return [r for _, r in idx]


def _aggregate(rows, agg: A.Aggregate):
    if agg.op == "count":
        return [{"count": T.Number(len(rows))}]
    vals = [r.get(agg.field) for r in rows]
    vals = [v for v in vals if v is not None]
    if not vals:
        raise EmptyAggregate(f"{agg.op} of {agg.field} over no rows")
    if isinstance(vals[0], T.Measure):
        vals = [T.to_base_unit(v) for v in vals]
    if agg.op in ("min", "max"):
        pick = vals[0]
        for v in vals[1:]:
            c = T.sort_key_cmp(v, pick)
            if (c < 0) if agg.op == "min" else (c > 0):
                pick = v
        return [{agg.output: pick}]
    total = sum(_magnitude(v) for v in vals)
    if agg.op == "avg":
        total /= len(vals)
    return [{agg.output: _rebuild(vals[0], total)}]


def _magnitude(v):
    return v.base if isinstance(v, T.Measure) else v.value


def _rebuild(like, x):
    if isinstance(like, T.Measure):
        return T.Measure(x, like.unit)
    if isinstance(like, T.Currency):
        return T.Currency(x, like.code)
    return T.Number(x)


def execute_query(q: A.Query, registry, env: Optional[Env] = None) -> list:
    """Evaluate a (typed) query; returns a list of records (dicts)."""
    env = env or Env()
    qb, _ = _backends(registry, q.base.cls)
    try:
        rows = qb.rows(q.base.name)
    except BackendFailure:
        raise
    except Exception as e:              # surface backend bugs uniformly
        raise BackendFailure(str(e)) from e
    rows = sorted(rows, key=_id_key)
    for name, expr in q.computed:
        origin = _resolve(expr.origin, env)
        for r in rows:
            loc = r.get(expr.field)
            r[name] = T.geo_distance(loc, origin) if loc is not None else None
    ev = _Evaluator(registry, env)
    rows = [r for r in rows if ev.test(q.filter, r)]
    if q.sort is not None:
        rows = _sort(rows, q.sort)
    if q.slice is not None:
        start = q.slice.start - 1
        rows = rows[start:start + q.slice.count]
    if q.aggregate is not None:
        rows = _aggregate(rows, q.aggregate)
    if q.projection is not None:
        keep = set(q.projection) | {"id"}
        rows = [{k: v for k, v in r.items() if k in keep} for r in rows]
    return rows


# ---------------------------------------------------------------------------
# Statements
# ---------------------------------------------------------------------------

def _bind_args(action: A.Action, row, env):
    args = {}
    for name, v in action.args:
        if v is A.Missing:
            raise MissingParameter(name)
        if isinstance(v, A.VarRef):
            v = row.get(v.name) if row is not None else None
        else:
            v = _resolve(v, env)
        args[name] = v
    return args


def _invoke(registry, action: A.Action, row, env) -> ActionOutcome:
    _, ab = _backends(registry, action.target.cls)
    args = _bind_args(action, row, env)
    nulls = [k for k, v in args.items() if v is None]
    if nulls:
        return ActionOutcome(action.target.name, False, f"no value for {nulls[0]}", {}, args)
    try:
        return ab.invoke(action.target.name, args)
    except BackendFailure as e:
        return ActionOutcome(action.target.name, False, str(e), {}, args)


def execute_statement(s, registry, env: Optional[Env] = None) -> ExecutionResult:
    env = env or Env()
    if isinstance(s, A.StreamStatement):
        raise TypeError("use run_monitor for monitor statements")
    if s.action is not None:
        for name, v in s.action.args:
            if v is A.Missing:
                raise MissingParameter(name)
        _backends(registry, s.action.target.cls)
    if s.query is None:
        return ExecutionResult(s, None, [_invoke(registry, s.action, None, env)])
    rows = execute_query(s.query, registry, env)
    res = ExecutionResult(s, rows)
    if s.action is not None:
        res.outcomes = [_invoke(registry, s.action, r, env) for r in rows]
    return res


def execute_program(typed, registry, env: Optional[Env] = None) -> list:
    prog = getattr(typed, "program", typed)
    return [execute_statement(s, registry, env) for s in prog.statements]


# ---------------------------------------------------------------------------
# Monitors
# ---------------------------------------------------------------------------

def row_key(row) -> str:
    """Canonical serialization of a row (measures in base units)."""
    def canon(v):
        if isinstance(v, T.Measure):
            return T.to_base_unit(v)
        if isinstance(v, T.Array):
            return T.Array(tuple(canon(x) for x in v.values))
        return v
    return json.dumps({k: encode_record({k: canon(v)})[k] for k, v in row.items()},
                      sort_keys=True, ensure_ascii=False)


def _query_classes(q: A.Query):
    out = [q.base]
    for node in A.walk_filter(q.filter):
        if isinstance(node, A.Subquery):
            out.extend(_query_classes(node.query))
    return out


def _versions(registry, q):
    out = []
    for ref in _query_classes(q):
        qb, _ = _backends(registry, ref.cls)
        out.append(qb.version(ref.name))
    return tuple(out)


def run_monitor(ms: A.StreamStatement, registry, env: Optional[Env] = None,
                max_ticks: int = 10, step: Optional[Callable[[int], None]] = None) -> list:
    """Poll the monitored query for ``max_ticks`` ticks.

    ``step(tick)`` runs before each tick (use it to mutate backends).  Returns
    ``(tick, fired_rows, outcomes)`` for each tick that fired."""
    env = env or Env()
    for name, v in ms.action.args:
        if v is A.Missing:
            raise MissingParameter(name)
    q = ms.monitor
    seen = {row_key(r) for r in execute_query(q, registry, env)}
    version = _versions(registry, q)
    log = []
    for tick in range(1, max_ticks + 1):
        if step is not None:
            step(tick)
        now = _versions(registry, q)
        if now == version:
            continue
        version = now
        rows = execute_query(q, registry, env)
        keys = [row_key(r) for r in rows]
        fired = [r for r, k in zip(rows, keys) if k not in seen]
        seen = set(keys)
        if fired:
            outcomes = [_invoke(registry, ms.action, r, env) for r in fired]
            log.append((tick, fired, outcomes))
    return log
