"""Skill runtime: manifests, declarative loaders and backends.

A skill is one ``.skill`` file holding a single class.  Concrete classes name a
loader:

* ``@dataset(file="x.jsonl")`` reads JSON lines, one object per record, each
  tagged with ``"_query"``.  Lines tagged ``"_action"`` declare failure rules
  for actions.
* ``@simrest(path=..., function=..., fields=...)`` fetches a JSON list over
  HTTP from the bundled fixture server and maps raw keys onto out-params.
"""
from __future__ import annotations

import copy
import functools
import http.server
import json
import logging
import threading
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import ast as A
from . import syntax
from . import types as T
from .errors import (
    UnknownClass,
    BackendFailure,
    DlgcError,
    DataValidation,
    LoaderError,
    MissingDataFile,
    UnknownQuery,
)
from .typecheck import Registry, resolve_library

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# JSON <-> Value
# ---------------------------------------------------------------------------

def decode_value(raw, ty: T.TypeExpr, where="", unit=None, field="") -> Optional[T.Value]:
    """Decode a JSON value against ``ty``.  ``None`` stays ``None`` (null field)."""
    if raw is None:
        return None

    def bad(expected=None):
        return DataValidation(field, str(expected or ty), json.dumps(raw)[:60], where)

    try:
        if ty == T.BOOLEAN:
            if not isinstance(raw, bool):
                raise bad()
            return T.Boolean(raw)
        if ty == T.NUMBER:
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise bad()
            return T.Number(raw)
        if ty == T.STRING:
            if not isinstance(raw, str):
                raise bad()
            return T.String(raw)
        if ty == T.CURRENCY:
            return T.Currency(float(_num(raw["value"])), raw["code"])
        if ty == T.DATE:
            if not isinstance(raw, str):
                raise bad()
            return T.Date.parse(raw)
        if ty == T.TIME:
            h, m = raw.split(":")
            return T.Time(int(h), int(m))
        if ty == T.LOCATION:
            return T.Location(_num(raw["lat"]), _num(raw["lon"]), raw.get("display", ""))
        if isinstance(ty, T.MeasureType):
            if isinstance(raw, dict):
                value, u = raw["value"], raw["unit"]
            elif unit is not None:
                value, u = raw, unit
            else:
                raise bad()
            m = T.Measure(_num(value), u)
            if m.unit_class != ty.unit_class:
                raise bad()
            return m
        if isinstance(ty, T.EntityType):
            if not isinstance(raw, dict) or not raw.get("id"):
                raise bad()
            etype = raw.get("type", ty.name)
            if etype != ty.name:
                raise bad()
            return T.Entity(etype, str(raw["id"]), raw.get("display") or "")
        if isinstance(ty, T.EnumType):
            if raw not in ty.variants:
                raise bad()
            return T.Enum(raw)
        if isinstance(ty, T.ArrayType):
            if not isinstance(raw, list):
                raise bad()
            return T.Array(tuple(decode_value(x, ty.elem, where, unit, field) for x in raw))
    except DataValidation:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, DlgcError) as e:
        raise DataValidation(field, f"{ty} ({e})", json.dumps(raw)[:60], where) from None
    raise bad()


def _num(x):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValueError(f"expected a number, got {x!r}")
    return x


def encode_value(v):
    """Inverse of :func:`decode_value` (modulo the declared type)."""
    if v is None:
        return None
    if isinstance(v, (T.Boolean, T.String)):
        return v.value
    if isinstance(v, T.Number):
        x = v.value
        return int(x) if x.is_integer() and abs(x) < 2 ** 53 else x
    if isinstance(v, T.Measure):
        return {"value": encode_value(T.Number(v.value)), "unit": v.unit}
    if isinstance(v, T.Currency):
        return {"value": encode_value(T.Number(v.value)), "code": v.code}
    if isinstance(v, T.Date):
        return v.iso()
    if isinstance(v, T.Time):
        return f"{v.hour:02d}:{v.minute:02d}"
    if isinstance(v, T.Location):
        return {"lat": v.lat, "lon": v.lon, "display": v.display}
    if isinstance(v, T.Entity):
        return {"type": v.entity_type, "id": v.id, "display": v.display}
    if isinstance(v, T.Enum):
        return v.value
    if isinstance(v, T.Array):
        return [encode_value(x) for x in v.values]
    raise TypeError(f"cannot encode {v!r}")


def encode_record(rec: dict) -> dict:
    return {k: encode_value(v) for k, v in rec.items()}


def validate_record(rec: dict, sig: A.FunctionSig, where=""):
    """Check field set and value types of a record against a query signature."""
    names = {p.name for p in sig.out_params}
    extra = set(rec) - names
    if extra:
        f = sorted(extra)[0]
        raise DataValidation(f, "no such field", "value", where)
    for p in sig.out_params:
        v = rec.get(p.name)
        if v is None:
            if p.name == "id":
                raise DataValidation("id", str(p.type), "null", where)
            continue
        if not T.value_matches(v, p.type):
            raise DataValidation(p.name, str(p.type), str(v.type), where)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

@dataclass
class ActionOutcome:
    action: str
    success: bool
    message: str = ""
    outputs: dict = field(default_factory=dict)
    args: dict = field(default_factory=dict)

    def to_json(self):
        return {"action": self.action, "success": self.success, "message": self.message,
                "args": encode_record(self.args), "outputs": encode_record(self.outputs)}


@dataclass(frozen=True)
class Mutation:
    """Dataset edit used by :func:`bump_dataset`.

    kind is ``insert`` (record), ``delete`` (id), ``update`` (id, changes) or
    ``noop``."""

    kind: str
    record: Optional[dict] = None
    id: Optional[str] = None
    changes: Optional[dict] = None


def _row_id(rec):
    v = rec.get("id")
    return v.id if isinstance(v, T.Entity) else (None if v is None else str(v))


class DatasetBackend:
    """In-memory tables keyed by query name.  Readers may run concurrently;
    writers take the skill lock."""

    def __init__(self, class_name, sigs: dict, tables: Optional[dict] = None):
        self.class_name = class_name
        self.sigs = dict(sigs)
        self._tables = {q: list(tables.get(q, [])) if tables else [] for q in self.sigs}
        self._versions = {q: 0 for q in self.sigs}
        self.lock = threading.RLock()

    def query_names(self):
        return list(self.sigs)

    def _check(self, q):
        if q not in self.sigs:
            raise UnknownQuery(f"@{self.class_name} has no query {q}")

    def rows(self, query_name) -> list:
        self._check(query_name)
        with self.lock:
            return [dict(r) for r in self._tables[query_name]]

    def version(self, query_name) -> int:
        self._check(query_name)
        return self._versions[query_name]

    def apply(self, query_name, m: Mutation):
        self._check(query_name)
        sig = self.sigs[query_name]
        where = f"{self.class_name}.{query_name}"
        with self.lock:
            table = self._tables[query_name]
            if m.kind == "insert":
                rec = {p.name: m.record.get(p.name) for p in sig.out_params}
                validate_record(m.record, sig, where)
                if any(_row_id(r) == _row_id(rec) for r in table):
                    raise DataValidation("id", "unique id", _row_id(rec), where)
                table.append(rec)
            elif m.kind == "delete":
                table[:] = [r for r in table if _row_id(r) != m.id]
            elif m.kind == "update":
                for i, r in enumerate(table):
                    if _row_id(r) == m.id:
                        new = dict(r)
                        new.update(m.changes or {})
                        validate_record(new, sig, where)
                        table[i] = new
            elif m.kind != "noop":
                raise ValueError(f"unknown mutation kind {m.kind!r}")
            self._versions[query_name] += 1


_OPS = {
    "==": lambda a, b: a == b,
    ">=": lambda a, b: a >= b,
    "<=": lambda a, b: a <= b,
}


class RuleActionBackend:
    """Actions succeed unless a declared failure rule matches their arguments.

    Successful invocations append to ``effects`` (append-only)."""

    def __init__(self, class_name, sigs: dict, rules=None, lock=None):
        self.class_name = class_name
        self.sigs = dict(sigs)
        self.rules = list(rules or [])
        self.effects = []
        self.lock = lock or threading.RLock()

    def invoke(self, action_name, args: dict) -> ActionOutcome:
        if action_name not in self.sigs:
            raise BackendFailure(f"@{self.class_name} has no action {action_name}")
        plain = encode_record(args)
        with self.lock:
            for rule in self.rules:
                if rule.get("_action") != action_name:
                    continue
                if self._matches(rule.get("_fail_when", {}), plain):
                    return ActionOutcome(action_name, False, rule.get("_message", "failed"),
                                         {}, dict(args))
            n = len(self.effects) + 1
            ref = f"{self.class_name[:2].upper()}{n:04d}"
            self.effects.append({"action": action_name, "args": plain, "reference": ref})
            return ActionOutcome(action_name, True, f"{action_name} done",
                                 {"reference": T.String(ref)}, dict(args))

    @staticmethod
    def _matches(cond, plain):
        for name, tests in cond.items():
            v = plain.get(name)
            if isinstance(v, dict) and "value" in v:
                v = v["value"]
            for op, lit in tests.items():
                try:
                    if v is None or not _OPS[op](v, lit):
                        return False
                except TypeError:
                    return False
        return True


class SimRestBackend(DatasetBackend):
    """Rows fetched from the mock REST server; ``refresh`` refetches."""

    def __init__(self, class_name, sigs, url, query_name, fields):
        super().__init__(class_name, sigs)
        self.url, self.query_name, self.fields = url, query_name, fields
        self.refresh()

    def refresh(self):
        try:
            with urllib.request.urlopen(self.url, timeout=10) as resp:
                data = json.load(resp)
        except (OSError, ValueError) as e:
            raise BackendFailure(f"{self.url}: {e}") from None
        sig = self.sigs[self.query_name]
        rows = []
        for i, raw in enumerate(data):
            rec = {}
            for src, (dst, unit) in self.fields.items():
                p = sig.param(dst)
                if p is None:
                    raise LoaderError(f"field mapping names unknown param {dst}")
                rec[dst] = decode_value(raw.get(src), p.type, f"{self.url}[{i}]", unit, src)
            validate_record(rec, sig, self.url)
            rows.append(rec)
        with self.lock:
            if rows != self._tables[self.query_name]:
                self._tables[self.query_name] = rows
            self._versions[self.query_name] += 1


# ---------------------------------------------------------------------------
# Mock REST fixture server
# ---------------------------------------------------------------------------

class _Quiet(http.server.SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass


_servers = {}
_servers_lock = threading.Lock()


def fixture_server(root) -> str:
    """Start (once per directory) a localhost server over ``root``; return base URL."""
    root = str(Path(root).resolve())
    with _servers_lock:
        if root not in _servers:
            handler = functools.partial(_Quiet, directory=root)
            srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
            threading.Thread(target=srv.serve_forever, daemon=True).start()
            _servers[root] = srv
        host, port = _servers[root].server_address[:2]
    return f"http://{host}:{port}"


def _parse_fields(spec):
    out = {}
    for item in filter(None, (s.strip() for s in spec.split(";"))):
        src, _, dst = item.partition("=")
        dst, _, unit = dst.partition("@")
        out[src.strip()] = (dst.strip(), unit.strip() or None)
    return out


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def _single_class(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise MissingDataFile(f"{path}: {e.strerror}") from None
    items = [x for x in syntax.parse_library(text) if isinstance(x, A.ClassDef)]
    if len(items) != 1:
        raise LoaderError(f"{path}: a skill file holds exactly one class")
    return items[0]


def load_manifest(path, registry: Optional[Registry] = None):
    """Load a ``.skill`` file; returns (ClassDef, QueryBackend, ActionBackend).

    Parents named in ``extends`` must already be in ``registry``.  Abstract
    classes load as signatures only (both backends ``None``)."""
    path = Path(path)
    cdef = _single_class(path)
    if cdef.abstract or cdef.loader is None:
        return cdef, None, None
    resolved = resolve_library([cdef], base=registry or Registry()).classes[cdef.name]
    qsigs = {n: s for n, s in resolved.functions.items() if s.kind == "query"}
    asigs = {n: s for n, s in resolved.functions.items() if s.kind == "action"}
    loader = cdef.loader
    if loader.kind == "dataset":
        fname = loader.arg("file")
        if not isinstance(fname, str):
            raise LoaderError(f"{path}: dataset loader needs file=\"...\"")
        data_path = path.parent / fname
        if not data_path.exists():
            raise MissingDataFile(f"{data_path} does not exist")
        tables, rules = {q: [] for q in qsigs}, []
        with open(data_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                where = f"{data_path.name}:{lineno}"
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataValidation("", f"JSON object ({e})", line[:40], where) from None
                if "_action" in obj:
                    if obj["_action"] not in asigs:
                        raise DataValidation("_action", "declared action", obj["_action"], where)
                    rules.append(obj)
                    continue
                qname = obj.pop("_query", None)
                if qname not in qsigs:
                    raise DataValidation("_query", "declared query", str(qname), where)
                sig = qsigs[qname]
                unknown = set(obj) - {p.name for p in sig.out_params}
                if unknown:
                    f = sorted(unknown)[0]
                    raise DataValidation(f, "declared field", f, where)
                rec = {p.name: decode_value(obj.get(p.name), p.type, where, field=p.name)
                       for p in sig.out_params}
                validate_record(rec, sig, where)
                if any(_row_id(r) == _row_id(rec) for r in tables[qname]):
                    raise DataValidation("id", "unique id", _row_id(rec), where)
                tables[qname].append(rec)
        qb = DatasetBackend(cdef.name, qsigs, tables)
        ab = RuleActionBackend(cdef.name, asigs, rules, qb.lock)
        return cdef, qb, ab
    if loader.kind == "simrest":
        rel, fn, fields = loader.arg("path"), loader.arg("function"), loader.arg("fields")
        if fn not in qsigs:
            raise LoaderError(f"{path}: simrest function {fn!r} is not a query")
        root = path.parent / "fixtures"
        if not (root / rel).exists():
            raise MissingDataFile(f"{root / rel} does not exist")
        url = f"{fixture_server(root)}/{rel}"
        qb = SimRestBackend(cdef.name, {fn: qsigs[fn]}, url, fn, _parse_fields(fields))
        ab = RuleActionBackend(cdef.name, asigs, [], qb.lock)
        return cdef, qb, ab
    raise LoaderError(f"{path}: unsupported loader @{loader.kind}")


def register(registry: Registry, classdef, qbackend=None, abackend=None) -> Registry:
    return registry.register(classdef, (qbackend, abackend) if qbackend or abackend else None)


def bump_dataset(backend: DatasetBackend, query_name, mutation: Mutation):
    """Apply a mutation; the query's version strictly increases."""
    backend.apply(query_name, mutation)


def skill_paths(dirs):
    out = []
    for d in dirs:
        d = Path(d)
        out.extend(sorted(d.glob("*.skill")) if d.is_dir() else [d])
    return out


def load_skills(dirs=None, registry: Optional[Registry] = None, only=None) -> Registry:
    """Load every ``.skill`` under ``dirs`` (default: the bundled demo skills),
    registering parents before children.  ``only`` keeps the named classes
    and their ancestors."""
    if dirs is None:
        dirs = [default_skill_dir()]
    registry = registry or Registry()
    pending = {}
    for p in skill_paths(dirs):
        cdef = _single_class(p)
        pending[cdef.name] = (p, cdef)
    if only is not None:
        keep, todo = set(), list(only)
        while todo:
            n = todo.pop()
            if n in pending and n not in keep:
                keep.add(n)
                todo.extend(pending[n][1].extends)
        missing = set(only) - set(pending)
        if missing:
            raise UnknownClass(f"no skill named {', '.join(sorted(missing))}")
        pending = {n: v for n, v in pending.items() if n in keep}
    while pending:
        ready = [n for n, (_, c) in pending.items()
                 if all(x in registry.classes for x in c.extends)]
        if not ready:
            # let resolution report the unknown parent or cycle
            resolve_library([c for _, c in pending.values()], base=registry)
            raise LoaderError("unresolvable skill dependencies")
        for name in sorted(ready):
            path, _ = pending.pop(name)
            cdef, qb, ab = load_manifest(path, registry)
            registry = register(registry, cdef, qb, ab)
    return registry


def default_skill_dir() -> Path:
    return Path(str(resources.files("dlgc") / "data" / "skills"))


def snapshot(registry: Registry) -> Registry:
    """Registry with deep-copied dataset backends, so a session can mutate freely."""
    backends = {}
    for name, (qb, ab) in registry.backends.items():
        qb2 = copy.copy(qb)
        qb2._tables = {k: list(v) for k, v in qb._tables.items()}
        qb2._versions = dict(qb._versions)
        qb2.lock = threading.RLock()
        ab2 = copy.copy(ab)
        ab2.effects = []
        ab2.lock = qb2.lock
        backends[name] = (qb2, ab2)
    return Registry(registry.classes, registry.acts, registry.lexicon, backends)
