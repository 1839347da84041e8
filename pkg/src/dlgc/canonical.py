"""Canonical form: one byte string per semantically equal program.

Filters go to CNF with clauses and literals sorted bytewise by their printed
form.  Keyword arguments, projections and computed fields are sorted by name,
measures are re-expressed in their base unit and strings NFC-normalized.
Statement order is left alone since it orders side effects.
"""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, replace
from itertools import product

from . import ast as A
from . import types as T
from .errors import FilterTooLarge
from .syntax import print_filter, print_program, print_value

MAX_LITERALS = 4096


@dataclass(frozen=True)
class CanonicalForm:
    typed: object           # TypedProgram whose program is canonical
    text: str

    @property
    def program(self):
        return self.typed if isinstance(self.typed, A.Program) else self.typed.program


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------

def canonical_value(v):
    if isinstance(v, T.Measure):
        return T.to_base_unit(v)
    if isinstance(v, T.String):
        return T.String(unicodedata.normalize("NFC", v.value))
    if isinstance(v, T.Array):
        return T.Array(tuple(canonical_value(x) for x in v.values))
    return v


def _sorted_unique(values):
    seen = {}
    for x in values:
        seen.setdefault(print_value(x).encode("utf-8"), x)
    return tuple(seen[k] for k in sorted(seen))


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

def _literal(f):
    if isinstance(f, A.Atom):
        rhs = canonical_value(f.rhs)
        if f.op == "in_array" and isinstance(rhs, T.Array):
            rhs = T.Array(_sorted_unique(rhs.values))
        return replace(f, rhs=rhs)
    if isinstance(f, A.Subquery):
        return replace(f, query=canonical_query(f.query))
    return f


def _nnf(f, neg=False):
    if isinstance(f, A.BoolFilter):
        return A.BoolFilter(f.value != neg)
    if isinstance(f, A.Not):
        return _nnf(f.child, not neg)
    if isinstance(f, (A.And, A.Or)):
        kids = tuple(_nnf(c, neg) for c in f.children)
        flip = isinstance(f, A.And) == neg          # De Morgan
        return A.Or(kids) if flip else A.And(kids)
    lit = _literal(f)
    return A.Not(lit) if neg else lit


def _key(f, computed):
    return print_filter(f, computed).encode("utf-8")


def _cnf(f, computed):
    """List of clauses; a clause is a dict key -> literal.  ``[]`` is true,
    a list holding an empty clause is false."""
    if isinstance(f, A.BoolFilter):
        return [] if f.value else [{}]
    if isinstance(f, A.And):
        out = []
        for c in f.children:
            out.extend(_cnf(c, computed))
        _guard(out)
        return out
    if isinstance(f, A.Or):
        parts = [_cnf(c, computed) for c in f.children]
        out = []
        for combo in product(*parts):
            merged = {}
            for clause in combo:
                merged.update(clause)
            out.append(merged)
            _guard(out)
        return out
    return [{_key(f, computed): f}]


def _guard(clauses):
    if sum(len(c) for c in clauses) > MAX_LITERALS:
        raise FilterTooLarge(f"CNF exceeds {MAX_LITERALS} literals")


def _tautology(clause, computed):
    for lit in clause.values():
        if isinstance(lit, A.Not) and _key(lit.child, computed) in clause:
            return True
    return False


def normalize_filter(f: A.FilterExpr, computed=None) -> A.FilterExpr:
    computed = computed or {}
    clauses = _cnf(_nnf(f), computed)
    if any(not c for c in clauses):
        return A.FALSE
    nodes = {}
    for c in clauses:
        if _tautology(c, computed):
            continue
        lits = [c[k] for k in sorted(c)]
        node = lits[0] if len(lits) == 1 else A.Or(tuple(lits))
        nodes.setdefault(_key(node, computed), node)
    if not nodes:
        return A.TRUE
    ordered = [nodes[k] for k in sorted(nodes)]
    return ordered[0] if len(ordered) == 1 else A.And(tuple(ordered))


# ---------------------------------------------------------------------------
# Queries and programs
# ---------------------------------------------------------------------------

def canonical_query(q: A.Query) -> A.Query:
    computed = tuple(sorted(
        ((n, A.Distance(e.field, canonical_value(e.origin))) for n, e in q.computed),
        key=lambda x: x[0]))
    return replace(
        q,
        computed=computed,
        filter=normalize_filter(q.filter, dict(computed)),
        projection=tuple(sorted(q.projection)) if q.projection is not None else None,
    )


def canonical_action(a: A.Action) -> A.Action:
    return replace(a, args=tuple(sorted(((k, canonical_value(v)) for k, v in a.args),
                                        key=lambda x: x[0])))


def canonical_statement(s):
    if isinstance(s, A.StreamStatement):
        return replace(s, monitor=canonical_query(s.monitor), action=canonical_action(s.action))
    return replace(
        s,
        query=canonical_query(s.query) if s.query is not None else None,
        action=canonical_action(s.action) if s.action is not None else None,
    )


def canonicalize_program(p: A.Program) -> A.Program:
    return replace(p, statements=tuple(canonical_statement(s) for s in p.statements))


def canonicalize(typed) -> CanonicalForm:
    """Canonicalize a TypedProgram (or a bare Program)."""
    if isinstance(typed, A.Program):
        prog = canonicalize_program(typed)
        return CanonicalForm(prog, print_program(prog))
    prog = canonicalize_program(typed.program)
    return CanonicalForm(replace(typed, program=prog), print_program(prog))


def is_canonical(p: A.Program) -> bool:
    return print_program(canonicalize_program(p)) == print_program(p)
