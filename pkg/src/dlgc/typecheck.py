"""Library resolution and static type checking.

``resolve_library`` flattens inheritance and qualifies entity types into a
:class:`Registry`.  ``typecheck_program`` binds every reference in a program
against the registry, resolves entity mentions written as plain strings, and
collects all diagnostics before raising.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from . import ast as A
from . import types as T
from .errors import (
    AmbiguousEntity,
    DuplicateSkill,
    TypeCheckError,
    UnknownClass,
    UnknownEntity,
)

CODES = (
    "UnknownClass", "UnknownFunction", "UnknownField", "TypeMismatch",
    "AbstractInstantiation", "BadOperatorForType", "DuplicateArg",
    "CyclicInheritance", "DuplicateClass",
)

ENV_TYPES = {"here": T.LOCATION, "now": T.DATE}


@dataclass(frozen=True)
class TypeDiagnostic:
    code: str
    span: A.Span
    message: str

    def __str__(self):
        return f"{self.span}: {self.code}: {self.message}"


@dataclass(frozen=True)
class ResolvedClass:
    name: str
    abstract: bool
    extends: tuple
    entities: tuple                 # qualified entity type names declared here
    functions: dict                 # name -> FunctionSig with qualified types
    loader: Optional[A.LoaderBinding]
    annotations: tuple
    source: A.ClassDef = field(compare=False, repr=False)

    @property
    def concrete(self):
        return not self.abstract and self.loader is not None

    def function(self, name):
        return self.functions.get(name)


class Registry:
    """Resolved classes, dialogue-act namespaces, entity lexicon and backends.

    Treated as immutable: ``register`` and ``with_classes`` return new
    registries sharing unchanged parts.
    """

    def __init__(self, classes=None, acts=None, lexicon=None, backends=None):
        self.classes = dict(classes or {})
        self.acts = dict(acts or {"Transaction": frozenset(A.TRANSACTION_ACTS)})
        self.lexicon = lexicon if lexicon is not None else T.BUILTIN_LEXICON
        self.backends = dict(backends or {})

    def _copy(self, **kw):
        args = dict(classes=self.classes, acts=self.acts, lexicon=self.lexicon,
                    backends=self.backends)
        args.update(kw)
        return Registry(**args)

    def get_class(self, name) -> ResolvedClass:
        try:
            return self.classes[name]
        except KeyError:
            raise UnknownClass(f"unknown class @{name}") from None

    def function(self, ref: A.FunctionRef) -> Optional[A.FunctionSig]:
        cls = self.classes.get(ref.cls)
        return cls.function(ref.name) if cls else None

    def backend(self, cls_name):
        return self.backends.get(cls_name)

    def entity_types(self):
        out = set(self.lexicon.types())
        for c in self.classes.values():
            out.update(c.entities)
        return out

    def register(self, classdef, backends=None) -> "Registry":
        """Add one skill class (and its backends); rejects duplicate names."""
        if classdef.name in self.classes:
            raise DuplicateSkill(f"@{classdef.name} is already registered")
        for parent in classdef.extends:
            if parent not in self.classes:
                raise UnknownClass(f"@{classdef.name} extends unknown @{parent}")
        reg = resolve_library([classdef], base=self)
        if backends is not None and backends[0] is not None:
            reg.backends[classdef.name] = backends
            lex = reg.lexicon
            for etype, entries in _entities_in(backends[0]).items():
                lex = lex.extended(etype, entries)
            reg.lexicon = lex
        return reg


def _entities_in(qbackend):
    found = {}
    for qname in qbackend.query_names():
        for rec in qbackend.rows(qname):
            for v in rec.values():
                vals = v.values if isinstance(v, T.Array) else (v,)
                for x in vals:
                    if isinstance(x, T.Entity):
                        found.setdefault(x.entity_type, {}).setdefault(
                            x.id, T.LexEntry(x.id, x.display or x.id))
    return {k: list(v.values()) for k, v in found.items()}


# ---------------------------------------------------------------------------
# Library resolution
# ---------------------------------------------------------------------------

def _sig_shape(sig):
    return (sig.kind, sig.name, tuple((p.direction, p.name, p.type, p.required) for p in sig.params))


def resolve_library(items, base: Optional[Registry] = None) -> Registry:
    """Flatten classes (own + inherited functions) into a Registry."""
    base = base or Registry()
    diags = []
    acts = dict(base.acts)
    defs = {}
    zero = A.Span()
    for item in items:
        if isinstance(item, A.ActDecl):
            acts[item.namespace] = acts.get(item.namespace, frozenset()) | frozenset(item.names)
            continue
        if item.name in defs or item.name in base.classes:
            diags.append(TypeDiagnostic("DuplicateClass", item.span or zero,
                                        f"class @{item.name} defined twice"))
            continue
        defs[item.name] = item
    classes = dict(base.classes)

    # topological order over the new definitions
    order, state = [], {}

    def visit(name, chain):
        if state.get(name) == "done":
            return True
        if state.get(name) == "active":
            cyc = " -> ".join("@" + c for c in chain + [name])
            diags.append(TypeDiagnostic("CyclicInheritance", defs[name].span or zero,
                                        f"inheritance cycle {cyc}"))
            return False
        state[name] = "active"
        ok = True
        for parent in defs[name].extends:
            if parent in defs:
                ok = visit(parent, chain + [name]) and ok
            elif parent not in classes:
                diags.append(TypeDiagnostic("UnknownClass", defs[name].span or zero,
                                            f"@{name} extends unknown class @{parent}"))
                ok = False
        state[name] = "done" if ok else "bad"
        if ok:
            order.append(name)
        return ok

    for name in defs:
        if state.get(name) is None:
            visit(name, [])

    lexicon_types = set(base.lexicon.types())
    for name in order:
        cdef = defs[name]
        span = cdef.span or zero
        if cdef.abstract and cdef.loader is not None:
            diags.append(TypeDiagnostic("AbstractInstantiation", span,
                                        f"abstract class @{name} cannot declare a loader"))
        own_entities = tuple(f"{name}:{e}" for e in cdef.entities)

        def qualify(ty, where):
            if isinstance(ty, T.ArrayType):
                return T.ArrayType(qualify(ty.elem, where))
            if not isinstance(ty, T.EntityType):
                return ty
            if ty.qualified:
                known = ty.name in lexicon_types or any(
                    ty.name in c.entities for c in classes.values()) or ty.name in own_entities
                if not known:
                    diags.append(TypeDiagnostic("UnknownClass", where,
                                                f"unknown entity type {ty.name}"))
                return ty
            if ty.name in cdef.entities:
                return T.EntityType(f"{name}:{ty.name}")
            for anc in _ancestors(name, defs, classes):
                if f"{anc}:{ty.name}" in classes[anc].entities:
                    return T.EntityType(f"{anc}:{ty.name}")
            diags.append(TypeDiagnostic("UnknownClass", where,
                                        f"entity type {ty.name} is not declared in @{name}"))
            return ty

        functions = {}
        origin = {}
        for parent in cdef.extends:
            for fname, sig in classes[parent].functions.items():
                if fname in functions and _sig_shape(functions[fname]) != _sig_shape(sig):
                    diags.append(TypeDiagnostic(
                        "TypeMismatch", span,
                        f"@{name} inherits conflicting {fname} from @{origin[fname]} and @{parent}"))
                    continue
                functions.setdefault(fname, sig)
                origin.setdefault(fname, parent)
        seen_own = set()
        for sig in cdef.functions:
            where = sig.span or span
            if sig.name in seen_own:
                diags.append(TypeDiagnostic("DuplicateArg", where,
                                            f"function {sig.name} declared twice in @{name}"))
                continue
            seen_own.add(sig.name)
            pnames = [p.name for p in sig.params]
            if len(set(pnames)) != len(pnames):
                diags.append(TypeDiagnostic("DuplicateArg", where,
                                            f"duplicate parameter in {sig.name}"))
            if sig.kind == "action" and any(p.direction == "out" for p in sig.params):
                diags.append(TypeDiagnostic("TypeMismatch", where,
                                            f"action {sig.name} cannot have out parameters"))
            if sig.kind == "query" and not sig.out_params:
                diags.append(TypeDiagnostic("TypeMismatch", where,
                                            f"query {sig.name} needs an out parameter"))
            params = tuple(replace(p, type=qualify(p.type, where)) for p in sig.params)
            rsig = replace(sig, params=params)
            if sig.name in functions and _sig_shape(functions[sig.name]) != _sig_shape(rsig):
                diags.append(TypeDiagnostic(
                    "TypeMismatch", where,
                    f"@{name}.{sig.name} redeclares an inherited function with different types"))
                continue
            functions[sig.name] = rsig
            origin[sig.name] = name
        classes[name] = ResolvedClass(name, cdef.abstract, cdef.extends, own_entities,
                                      functions, cdef.loader, cdef.annotations, cdef)
    if diags:
        raise TypeCheckError(diags)
    return base._copy(classes=classes, acts=acts)


def _ancestors(name, defs, classes):
    out, todo = [], list(defs[name].extends if name in defs else classes[name].extends)
    while todo:
        a = todo.pop(0)
        if a in out:
            continue
        out.append(a)
        todo.extend(classes[a].extends if a in classes else defs[a].extends)
    return out


def lookup_entity(registry: Registry, lexicon, entity_type: str, text: str) -> T.Entity:
    lex = lexicon if lexicon is not None else registry.lexicon
    return lex.lookup(entity_type, text)


# ---------------------------------------------------------------------------
# Program checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TypedProgram:
    """A checked program: entity mentions resolved, absent required action
    parameters made explicit as ``??``."""

    program: A.Program
    registry: Registry = field(compare=False, repr=False)
    executable: bool = True


def query_schema(q: A.Query, registry: Registry, stage="output") -> dict:
    """Field -> type at a pipeline stage: "filter" (base + computed) or "output"."""
    sig = registry.function(q.base)
    schema = {p.name: p.type for p in sig.out_params}
    for name, expr in q.computed:
        schema[name] = T.MeasureType("length")
    if stage == "filter":
        return schema
    if q.aggregate is not None:
        agg = q.aggregate
        schema = {agg.output: T.NUMBER if agg.op == "count" else schema[agg.field]}
    if q.projection is not None:
        keep = set(q.projection) | ({"id"} if "id" in schema else set())
        schema = {k: v for k, v in schema.items() if k in keep}
    return schema


class _Checker:
    def __init__(self, registry: Registry):
        self.r = registry
        self.diags = []
        self.executable = True

    def err(self, code, span, msg):
        self.diags.append(TypeDiagnostic(code, span or A.Span(), msg))

    # -- values -----------------------------------------------------------
    def coerce(self, v, expected, span, what):
        """Return ``v`` checked (and entity mentions resolved) against ``expected``."""
        if isinstance(v, A.EnvRef):
            got = ENV_TYPES.get(v.name)
            if got != expected:
                self.err("TypeMismatch", span, f"{what}: ${v.name} is {got}, expected {expected}")
            return v
        if isinstance(expected, T.EntityType) and isinstance(v, T.String):
            try:
                return lookup_entity(self.r, None, expected.name, v.value)
            except (UnknownEntity, AmbiguousEntity) as e:
                self.err("TypeMismatch", span, f"{what}: {e}")
                return v
        if isinstance(expected, T.ArrayType) and isinstance(v, T.Array):
            vals = tuple(self.coerce(x, expected.elem, span, what) for x in v.values)
            try:
                return T.Array(vals)
            except T.TypeMismatch:
                return v
        if not isinstance(v, T.Value) or not T.value_matches(v, expected):
            got = v.type if isinstance(v, T.Value) else type(v).__name__
            self.err("TypeMismatch", span, f"{what}: expected {expected}, got {got}")
        return v

    # -- queries ----------------------------------------------------------
    def query(self, q: A.Query) -> A.Query:
        sig = self.function(q.base, "query", q.span)
        if sig is None:
            return q
        base_fields = {p.name: p.type for p in sig.out_params}
        computed = []
        for name, expr in q.computed:
            if expr.field not in base_fields:
                self.err("UnknownField", q.span, f"no field {expr.field} in {q.base}")
            elif base_fields[expr.field] != T.LOCATION:
                self.err("BadOperatorForType", q.span, f"distance needs a Location, {expr.field} is "
                         f"{base_fields[expr.field]}")
            if name in base_fields:
                self.err("TypeMismatch", q.span, f"computed field {name} shadows a field of {q.base}")
            origin = self.coerce(expr.origin, T.LOCATION, q.span, "distance origin")
            computed.append((name, A.Distance(expr.field, origin)))
        q = replace(q, computed=tuple(computed))
        schema = query_schema(q, self.r, "filter")
        q = replace(q, filter=self.filter(q.filter, schema, q))
        if q.sort is not None:
            t = schema.get(q.sort.field)
            if t is None:
                self.err("UnknownField", q.span, f"cannot sort on unknown field {q.sort.field}")
            elif not T.is_sortable(t):
                self.err("BadOperatorForType", q.span, f"cannot sort on {t}")
        if q.aggregate is not None and q.aggregate.field is not None:
            t = schema.get(q.aggregate.field)
            op = q.aggregate.op
            if t is None:
                self.err("UnknownField", q.span, f"cannot aggregate unknown field {q.aggregate.field}")
                return q
            ok = T.is_numeric(t) if op in ("sum", "avg") else T.is_ordered(t)
            if not ok:
                self.err("BadOperatorForType", q.span, f"{op} is not defined on {t}")
        if q.projection is not None:
            try:
                post = query_schema(replace(q, projection=None), self.r)
            except KeyError:
                return q
            for f in q.projection:
                if f not in post:
                    self.err("UnknownField", q.span, f"cannot project unknown field {f}")
        return q

    def function(self, ref, kind, span):
        cls = self.r.classes.get(ref.cls)
        if cls is None:
            self.err("UnknownClass", ref.span or span, f"unknown class @{ref.cls}")
            return None
        sig = cls.function(ref.name)
        if sig is None:
            self.err("UnknownFunction", ref.span or span, f"@{ref.cls} has no function {ref.name}")
            return None
        if sig.kind != kind:
            self.err("UnknownFunction", ref.span or span, f"{ref} is an {sig.kind}, not a {kind}")
            return None
        if not cls.concrete:
            self.executable = False
        return sig

    def filter(self, f, schema, q):
        if isinstance(f, A.BoolFilter):
            return f
        if isinstance(f, (A.And, A.Or)):
            return type(f)(tuple(self.filter(c, schema, q) for c in f.children))
        if isinstance(f, A.Not):
            return A.Not(self.filter(f.child, schema, q))
        span = getattr(f, "span", None) or q.span
        if isinstance(f, A.DontCare):
            if f.field not in schema:
                self.err("UnknownField", span, f"no field {f.field} in {q.base}")
            return f
        t = schema.get(f.field)
        if t is None:
            self.err("UnknownField", span, f"no field {f.field} in {q.base}")
            return f
        if isinstance(f, A.Subquery):
            inner = self.query(f.query)
            if self.r.function(inner.base) is None:
                return replace(f, query=inner)
            try:
                ischema = query_schema(inner, self.r)
            except KeyError:
                return replace(f, query=inner)
            it = ischema.get(f.inner_field)
            if it is None:
                self.err("UnknownField", span, f"no field {f.inner_field} in {inner.base}")
            elif f.op == "contains":
                if not (isinstance(it, T.ArrayType) and it.elem == t):
                    self.err("TypeMismatch", span, f"contains({f.inner_field}, {f.field}): {it} vs {t}")
            else:
                if it != t:
                    self.err("TypeMismatch", span, f"{f.inner_field} {f.op} {f.field}: {it} vs {t}")
                elif f.op != "==" and not T.is_ordered(t):
                    self.err("BadOperatorForType", span, f"{f.op} is not defined on {t}")
            return replace(f, query=inner)
        what = f"{f.field} {f.op}"
        op = f.op
        if op == "==":
            if isinstance(t, T.ArrayType):
                self.err("BadOperatorForType", span, f"use contains() on array field {f.field}")
                return f
            return replace(f, rhs=self.coerce(f.rhs, t, span, what))
        if op in (">=", "<="):
            if not T.is_ordered(t):
                self.err("BadOperatorForType", span, f"{op} is not defined on {t}")
                return f
            return replace(f, rhs=self.coerce(f.rhs, t, span, what))
        if op == "contains":
            if not isinstance(t, T.ArrayType):
                self.err("BadOperatorForType", span, f"contains needs an array field, {f.field} is {t}")
                return f
            return replace(f, rhs=self.coerce(f.rhs, t.elem, span, what))
        if op == "in_array":
            if isinstance(t, T.ArrayType):
                self.err("BadOperatorForType", span, f"in_array needs a scalar field, {f.field} is {t}")
                return f
            return replace(f, rhs=self.coerce(f.rhs, T.ArrayType(t), span, what))
        if op == "substr":
            if t != T.STRING:
                self.err("BadOperatorForType", span, f"substr needs a String field, {f.field} is {t}")
                return f
            return replace(f, rhs=self.coerce(f.rhs, T.STRING, span, what))
        return f

    # -- actions / statements --------------------------------------------
    def action(self, a: A.Action, out_schema) -> A.Action:
        sig = self.function(a.target, "action", a.span)
        if sig is None:
            return a
        args, seen = [], set()
        for name, v in a.args:
            if name in seen:
                self.err("DuplicateArg", a.span, f"parameter {name} given twice")
                continue
            seen.add(name)
            p = sig.param(name)
            if p is None or p.direction != "in":
                self.err("UnknownField", a.span, f"{a.target} has no parameter {name}")
                args.append((name, v))
                continue
            if v is A.Missing:
                args.append((name, v))
            elif isinstance(v, A.VarRef):
                t = (out_schema or {}).get(v.name)
                if out_schema is None or t is None:
                    self.err("UnknownField", a.span, f"{name}={v.name}: no such query output field")
                elif t != p.type:
                    self.err("TypeMismatch", a.span, f"{name}={v.name}: {t} does not match {p.type}")
                args.append((name, v))
            else:
                args.append((name, self.coerce(v, p.type, a.span, f"parameter {name}")))
        for p in sig.in_params:
            if p.required and p.name not in seen:
                args.append((p.name, A.Missing))
        return replace(a, args=tuple(args))

    def statement(self, s):
        if isinstance(s, A.StreamStatement):
            q = self.query(s.monitor)
            return replace(s, monitor=q, action=self.action(s.action, self._out(q)))
        q = s.query
        if (q is not None and s.action is None and self._is_bare(q)):
            sig = self.r.function(q.base)
            if sig is not None and sig.kind == "action":
                return replace(s, query=None, action=self.action(A.Action(q.base, (), span=q.span), None))
        if q is not None:
            q = self.query(q)
        act = self.action(s.action, self._out(q) if q is not None else None) if s.action else None
        return replace(s, query=q, action=act)

    @staticmethod
    def _is_bare(q):
        return (q.filter == A.TRUE and not q.computed and q.sort is None and q.slice is None
                and q.aggregate is None and q.projection is None)

    def _out(self, q):
        if self.r.function(q.base) is None:
            return None
        try:
            return query_schema(q, self.r)
        except KeyError:
            return None

    def program(self, p: A.Program) -> A.Program:
        ns = self.r.acts.get(p.act.namespace)
        if ns is None:
            self.err("UnknownClass", p.act.span, f"unknown dialogue act namespace @{p.act.namespace}")
        elif p.act.name not in ns:
            self.err("UnknownFunction", p.act.span, f"unknown dialogue act {p.act}")
        return replace(p, statements=tuple(self.statement(s) for s in p.statements))


def typecheck_program(p: A.Program, registry: Registry) -> TypedProgram:
    """Type-check ``p``; raises TypeCheckError carrying every diagnostic."""
    A.validate(p)
    chk = _Checker(registry)
    checked = chk.program(p)
    if chk.diags:
        raise TypeCheckError(chk.diags)
    return TypedProgram(checked, registry, chk.executable)


def check_statement(stmt, registry: Registry):
    chk = _Checker(registry)
    out = chk.statement(stmt)
    if chk.diags:
        raise TypeCheckError(chk.diags)
    return out
