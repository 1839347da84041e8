"""Template-driven synthesis of (context, utterance, program) data.

Template files hold one stanza per template::

    id: filter.temperature.ge
    category: filter-phrase
    guard: Measure(temperature)
    pattern: with ${p:param} hotter than ${v:value}
    constructor: ${p} >= ${v}

Pattern holes are ``${name:category}`` or ``${name:category|Type}``; the
constructor is program surface syntax that refers to the same holes as
``${name}`` (chain holes expose ``${c.query}`` and ``${c.action}``).  For
filter and query phrases ``guard`` restricts the type of the ``param`` hole;
for statements it lists the query kinds accepted (plain, ranked, aggregate,
projection); for value phrases it is the type the phrase denotes.
"""
from __future__ import annotations

import itertools
import logging
import random
import re
import unicodedata
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from . import ast as A
from . import syntax as S
from . import types as T
from .canonical import canonical_value, canonicalize_program, normalize_filter
from .dialogue import (
    DialogueState,
    Runtime,
    agent_policy,
    apply_user_turn,
    summarize,
)
from .errors import (
    DlgcError,
    DuplicateTemplateId,
    TemplateError,
    Unparseable,
    UnknownHoleCategory,
)
from .execute import Env
from .typecheck import Registry, typecheck_program

log = logging.getLogger(__name__)

TEMPLATE_CATEGORIES = ("value-phrase", "filter-phrase", "query-phrase", "action-phrase",
                       "statement", "dialogue-turn")
HOLE_CATEGORIES = ("table", "param", "prep", "value", "number", "filter", "query", "join",
                   "action", "chain", "refaction", "answer")
QUERY_KINDS = ("plain", "ranked", "aggregate", "projection")

PATTERN_HOLE = re.compile(r"\$\{(\w+):([\w-]+)(?:\|([^}]*))?\}")
CONS_HOLE = re.compile(r"\$\{(\w+)(?:\.(\w+))?\}")
ANY_HOLE = re.compile(r"\$\{[^}]*\}")

VALUES_PER_HOLE = 3
CAP_PER_TEMPLATE = 40
NUMBERS = (2, 3)
REF_PHRASES = (("the first one", 1), ("the second one", 2), ("the third one", 3),
               ("it", 0), ("that", 0))
DEFAULT_ACT_PROBS = {"new": .3, "refine": .2, "fill": .2, "confirm": .15, "reject": .05,
                     "thank": .1}
MAX_DIALOGUE_TURNS = 10


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hole:
    name: str
    category: str
    type_guard: Optional[str] = None


@dataclass(frozen=True)
class Template:
    id: str
    category: str
    pattern: str
    constructor: str
    guard: Optional[str] = None
    holes: tuple = ()

    def hole(self, name):
        return next((h for h in self.holes if h.name == name), None)

    def holes_of(self, *cats):
        return [h for h in self.holes if h.category in cats]


def parse_template(fields: dict, where="") -> Template:
    for k in ("id", "category", "pattern", "constructor"):
        if k not in fields:
            raise TemplateError(f"{where}: template is missing '{k}'")
    if fields["category"] not in TEMPLATE_CATEGORIES:
        raise TemplateError(f"{where}: unknown template category {fields['category']!r}")
    holes = []
    for m in PATTERN_HOLE.finditer(fields["pattern"]):
        name, cat, ty = m.group(1), m.group(2), m.group(3)
        if cat not in HOLE_CATEGORIES:
            raise UnknownHoleCategory(f"{where}: {fields['id']}: unknown hole category {cat!r}")
        if any(h.name == name for h in holes):
            raise TemplateError(f"{where}: {fields['id']}: hole {name} used twice")
        holes.append(Hole(name, cat, ty))
    if len(ANY_HOLE.findall(fields["pattern"])) != len(holes):
        raise TemplateError(f"{where}: {fields['id']}: malformed hole in pattern")
    used = {m.group(1) for m in CONS_HOLE.finditer(fields["constructor"])}
    if len(ANY_HOLE.findall(fields["constructor"])) != len(CONS_HOLE.findall(fields["constructor"])):
        raise TemplateError(f"{where}: {fields['id']}: malformed hole in constructor")
    declared = {h.name for h in holes}
    if used != declared:
        diff = sorted(used ^ declared)
        raise TemplateError(f"{where}: {fields['id']}: unmatched hole(s) {', '.join(diff)}")
    return Template(fields["id"], fields["category"], fields["pattern"], fields["constructor"],
                    fields.get("guard"), tuple(holes))


def parse_templates(text: str, where="<string>") -> list:
    out, cur, start = [], {}, 1
    for lineno, line in enumerate(text.splitlines() + [""], 1):
        s = line.strip()
        if s.startswith("#"):
            continue
        if not s:
            if cur:
                out.append(parse_template(cur, f"{where}:{start}"))
                cur = {}
            continue
        key, sep, val = s.partition(":")
        if not sep:
            raise TemplateError(f"{where}:{lineno}: expected 'key: value'")
        if not cur:
            start = lineno
        key = key.strip()
        if key not in ("id", "category", "guard", "pattern", "constructor"):
            raise TemplateError(f"{where}:{lineno}: unknown key {key!r}")
        cur[key] = val.strip()
    return out


def load_templates(path=None) -> list:
    """Load a template file or every ``*.tmpl`` in a directory (default: bundled)."""
    path = Path(path) if path is not None else default_template_dir()
    files = sorted(path.glob("*.tmpl")) if path.is_dir() else [path]
    out, seen = [], set()
    for f in files:
        for t in parse_templates(f.read_text(encoding="utf-8"), str(f)):
            if t.id in seen:
                raise DuplicateTemplateId(f"{f}: duplicate template id {t.id}")
            seen.add(t.id)
            out.append(t)
    return out


def default_template_dir() -> Path:
    return Path(str(resources.files("dlgc") / "data" / "templates"))


def type_matches(ty, guard: Optional[str]) -> bool:
    if not guard:
        return True
    return any(_match_one(ty, g.strip()) for g in guard.split("|"))


def _match_one(ty, g):
    if g == "*":
        return True
    if g == "Entity(*)":
        return isinstance(ty, T.EntityType)
    if g == "Enum(*)":
        return isinstance(ty, T.EnumType)
    if g == "Measure(*)":
        return isinstance(ty, T.MeasureType)
    if g.startswith("Array(") and g.endswith(")"):
        return isinstance(ty, T.ArrayType) and _match_one(ty.elem, g[6:-1])
    return str(ty) == g


# ---------------------------------------------------------------------------
# Pairs, normalization, lint
# ---------------------------------------------------------------------------

@dataclass
class SynthPair:
    context: str
    utterance: str
    program: str                    # canonical surface syntax
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def depth(self):
        return self.meta.get("depth", 0)


TOKEN_RE = re.compile(r"\d{4}-\d{2}-\d{2}(?:[tT]\d{2}:\d{2})?|\d+(?:\.\d+)?|[^\W_]+(?:'[^\W_]+)*")


def tokens(text: str) -> list:
    """Tokens in original case (dates, decimals, words)."""
    return TOKEN_RE.findall(unicodedata.normalize("NFC", text))


def norm_tokens(text: str) -> list:
    return [t.casefold() for t in tokens(text)]


def normalize_utterance(text: str) -> str:
    return " ".join(norm_tokens(text))


def _contains_seq(hay, needle):
    n = len(needle)
    return n > 0 and any(hay[i:i + n] == needle for i in range(len(hay) - n + 1))


@dataclass(frozen=True)
class LintViolation:
    kind: str                       # ConstantNotInUtteranceOrContext | NonCanonicalProgram | TypeError
    value: str
    span: tuple = (0, 0)

    def __str__(self):
        return f"{self.kind}({self.value})"


def program_literals(node) -> list:
    """String and Number literals of a program, in print order."""
    out = []
    map_values(node, lambda v: (out.append(v) if isinstance(v, (T.String, T.Number)) else None) or v)
    return out


def lint_pair(pair: SynthPair, registry: Registry) -> list:
    try:
        prog = S.parse_program(pair.program)
        typecheck_program(prog, registry)
    except DlgcError as e:
        return [LintViolation("TypeError", str(e), (0, len(pair.program)))]
    out = []
    canon = S.print_program(canonicalize_program(prog))
    if canon != pair.program:
        out.append(LintViolation("NonCanonicalProgram", pair.program, (0, len(pair.program))))
    utt, ctx = norm_tokens(pair.utterance), norm_tokens(pair.context)
    for v in program_literals(prog):
        text = v.value if isinstance(v, T.String) else S.fmt_number(v.value)
        needle = norm_tokens(text)
        if not needle:
            continue
        if not (_contains_seq(utt, needle) or _contains_seq(ctx, needle)):
            printed = S.print_value(v)
            at = pair.program.find(printed)
            out.append(LintViolation("ConstantNotInUtteranceOrContext", text,
                                     (at, at + len(printed)) if at >= 0 else (0, 0)))
    return out


# ---------------------------------------------------------------------------
# AST value mapping
# ---------------------------------------------------------------------------

def map_values(node, fn):
    """Rebuild ``node`` with every operand ``v`` replaced by ``fn(v)``."""
    if isinstance(node, A.Program):
        return replace(node, statements=tuple(map_values(s, fn) for s in node.statements))
    if isinstance(node, A.StreamStatement):
        return replace(node, monitor=map_values(node.monitor, fn), action=map_values(node.action, fn))
    if isinstance(node, A.Statement):
        return replace(node, query=map_values(node.query, fn) if node.query else None,
                       action=map_values(node.action, fn) if node.action else None)
    if isinstance(node, A.Query):
        comp = tuple((n, A.Distance(d.field, fn(d.origin))) for n, d in node.computed)
        sl = node.slice
        if sl is not None:
            c = fn(T.Number(sl.count) if isinstance(sl.count, int) else sl.count)
            sl = A.SliceSpec(sl.start, int(c.value) if isinstance(c, T.Number) else c)
        return replace(node, computed=comp, filter=map_values(node.filter, fn), slice=sl)
    if isinstance(node, (A.And, A.Or)):
        return type(node)(tuple(map_values(c, fn) for c in node.children))
    if isinstance(node, A.Not):
        return A.Not(map_values(node.child, fn))
    if isinstance(node, A.Atom):
        rhs = node.rhs
        if isinstance(rhs, (T.Array, _ArrayHole)):
            vals = tuple(fn(x) for x in rhs.values)
            if all(isinstance(x, T.Value) for x in vals):
                return replace(node, rhs=T.Array(vals))
            return replace(node, rhs=_ArrayHole(vals))
        return replace(node, rhs=fn(rhs))
    if isinstance(node, A.Subquery):
        return replace(node, query=map_values(node.query, fn))
    if isinstance(node, A.Action):
        return replace(node, args=tuple((k, fn(v)) for k, v in node.args))
    return node


@dataclass(frozen=True)
class _ArrayHole:
    """Array literal whose elements may be placeholders."""
    values: tuple


# ---------------------------------------------------------------------------
# Expansion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Table:
    ref: A.FunctionRef
    sig: A.FunctionSig
    plural: str

    @property
    def id_type(self):
        p = self.sig.param("id")
        return p.type if p is not None else None

    @property
    def fields(self):
        return [p for p in self.sig.out_params if p.name != "id"]


@dataclass(frozen=True)
class Phrase:
    text: str
    src: str
    depth: int = 0
    slots: tuple = ()               # ((phrase text, Value), ...) in utterance order
    tids: tuple = ()                # template ids used
    kind: str = ""
    table: Optional[Table] = None
    parts: tuple = ()               # named sub-sources (chain: query, action)
    meta: tuple = ()                # extra (key, value) pairs


def render_value(v) -> str:
    if isinstance(v, T.Entity):
        return v.display or v.id
    if isinstance(v, T.String):
        return v.value
    if isinstance(v, T.Number):
        return S.fmt_number(v.value)
    if isinstance(v, T.Measure):
        return f"{S.fmt_number(v.value)} {v.unit}"
    if isinstance(v, T.Currency):
        return f"{S.fmt_number(v.value)} {v.code}"
    if isinstance(v, T.Date):
        return v.iso()
    if isinstance(v, T.Enum):
        return v.value.replace("_", " ")
    if isinstance(v, T.Boolean):
        return "true" if v.value else "false"
    if isinstance(v, T.Time):
        return f"{v.hour}:{v.minute:02d}"
    return S.print_value(v)


def _clean(text):
    return " ".join(text.split())


def _rng(seed, *key):
    return random.Random("|".join([str(seed)] + [str(k) for k in key]))


def _sample(items, k, seed, *key):
    items = list(items)
    if len(items) <= k:
        return items
    idx = sorted(_rng(seed, *key).sample(range(len(items)), k))
    return [items[i] for i in idx]


def _utterances(sig):
    u = sig.annotation("utterance")
    return [x.strip() for x in u.split("|")] if isinstance(u, str) and u.strip() else []


class Expander:
    """Bottom-up grammar expansion over one registry."""

    def __init__(self, registry: Registry, templates, depth=2, seed=0, cap=CAP_PER_TEMPLATE):
        self.r = registry
        self.depth = depth
        self.seed = seed
        self.cap = cap
        self.templates = list(templates)
        self.by_cat = {}
        for t in self.templates:
            self.by_cat.setdefault(t.category, []).append(t)
        self.tables = []
        self.actions = []               # (ref, sig)
        for name in sorted(registry.classes):
            cls = registry.classes[name]
            if not cls.concrete or registry.backend(name) is None:
                continue
            for fname in sorted(cls.functions):
                sig = cls.functions[fname]
                ref = A.FunctionRef(name, fname)
                if sig.kind == "query" and sig.annotation("canonical"):
                    self.tables.append(Table(ref, sig, sig.annotation("canonical")))
                elif sig.kind == "action":
                    self.actions.append((ref, sig))
        self._entities = None
        self._filters = {}
        self._queries = {}
        self.rejected = []

    # -- values -------------------------------------------------------------
    def entity_pool(self, etype):
        if self._entities is None:
            pool = {}
            for name, (qb, _) in sorted(self.r.backends.items()):
                if qb is None:
                    continue
                for q in qb.query_names():
                    for rec in qb.rows(q):
                        for v in rec.values():
                            for x in (v.values if isinstance(v, T.Array) else (v,)):
                                if isinstance(x, T.Entity):
                                    pool.setdefault(x.entity_type, {}).setdefault(x.id, x)
            self._entities = {k: [d[i] for i in sorted(d)] for k, d in pool.items()}
        found = list(self._entities.get(etype, []))
        if not found:
            found = [T.Entity(etype, e.id, e.display) for e in self.r.lexicon.entries(etype)]
        return found

    def column(self, table: Table, pname):
        qb, _ = self.r.backend(table.ref.cls)
        vals = {}
        for rec in qb.rows(table.ref.name):
            v = rec.get(pname)
            for x in (v.values if isinstance(v, T.Array) else (v,)):
                if x is not None:
                    vals.setdefault(S.print_value(x), x)
        return [vals[k] for k in sorted(vals)]

    def env_phrases(self, ty):
        out = []
        for t in self.by_cat.get("value-phrase", []):
            if t.guard and str(ty) == t.guard:
                v = A.EnvRef(t.constructor.lstrip("$"))
                out.append(Phrase(t.pattern, t.constructor, tids=(t.id,)))
        return out

    def values(self, ty, table: Optional[Table] = None, param: Optional[A.Param] = None, key=""):
        """Value phrases for a hole of type ``ty``."""
        if isinstance(ty, T.ArrayType):
            ty = ty.elem
        if ty == T.LOCATION:
            return self.env_phrases(ty)
        cands = []
        if param is not None and param.annotation("examples"):
            for raw in str(param.annotation("examples")).split("|"):
                v = _literal_for(raw.strip(), ty)
                if v is not None:
                    cands.append(v)
        elif isinstance(ty, T.EnumType):
            cands = [T.Enum(x) for x in ty.variants]
        elif isinstance(ty, T.EntityType) and (table is None or param is None):
            cands = self.entity_pool(ty.name)
        elif table is not None and param is not None:
            cands = self.column(table, param.name)
        if not (isinstance(ty, T.EntityType) and table is None):
            # entities named directly as action arguments are all kept, so
            # every row can be acted on by name; everything else is sampled
            cands = _sample(cands, VALUES_PER_HOLE, self.seed, key, ty)
        out = [Phrase(render_value(v), S.print_value(v), slots=((render_value(v), v),)) for v in cands]
        if ty == T.DATE:
            out += self.env_phrases(ty)
        return out

    # -- template instantiation -------------------------------------------
    def instantiate(self, t: Template, assign: dict, depth=0, kind="", table=None, meta=()):
        def text_sub(m):
            return assign[m.group(1)].text
        text = _clean(PATTERN_HOLE.sub(text_sub, t.pattern))

        def src_sub(m):
            ph = assign[m.group(1)]
            return dict(ph.parts)[m.group(2)] if m.group(2) else ph.src
        src = CONS_HOLE.sub(src_sub, t.constructor)
        slots, tids = [], [t.id]
        for h in t.holes:
            ph = assign[h.name]
            slots.extend(ph.slots)
            tids.extend(ph.tids)
        return Phrase(text, src, depth, tuple(slots), tuple(tids), kind, table, meta=meta)

    def _product(self, t, choices: dict, key, distinct=()):
        names = [h.name for h in t.holes]
        combos = itertools.product(*(choices[n] for n in names))
        out = []
        for combo in combos:
            assign = dict(zip(names, combo))
            if distinct and len({assign[n].src for n in distinct}) < len(distinct):
                continue
            out.append(assign)
        return _sample(out, self.cap, self.seed, t.id, key)

    # -- filters ----------------------------------------------------------
    def atoms(self, table: Table):
        out = []
        for t in self.by_cat.get("filter-phrase", []):
            if t.holes_of("filter", "query", "join"):
                continue
            phole = next(iter(t.holes_of("param", "prep")), None)
            if phole is None:
                continue
            per = []
            for p in table.fields:
                if not type_matches(p.type, t.guard):
                    continue
                if phole.category == "prep" and not p.annotation("prep"):
                    continue
                label = p.annotation("prep") if phole.category == "prep" else _canon(p)
                choices = {phole.name: [Phrase(label, p.name)]}
                vals = t.holes_of("value")
                for h in vals:
                    ty = S.parse_type(h.type_guard) if h.type_guard else p.type
                    choices[h.name] = self.values(ty, table, p, key=f"{table.ref}.{p.name}")
                if any(not c for c in choices.values()):
                    continue
                for assign in self._product(t, choices, f"{table.ref}.{p.name}",
                                            distinct=[h.name for h in vals] if len(vals) > 1 else ()):
                    per.append(self.instantiate(t, assign, 1, "filter", table))
            out.extend(_sample(per, self.cap, self.seed, t.id, table.ref))
        return out

    def filters(self, table: Table):
        """All filter phrases for ``table`` up to the expansion depth."""
        key = str(table.ref)
        if key in self._filters:
            return self._filters[key]
        self._filters[key] = []         # guards recursion through subqueries
        atoms = self.atoms(table)
        out = list(atoms)
        for t in self.by_cat.get("filter-phrase", []):
            fh = t.holes_of("filter")
            if t.holes_of("query"):
                out.extend(self._subqueries(t, table))
                continue
            if not fh:
                continue
            if len(fh) == 1:
                made = [self.instantiate(t, {fh[0].name: f}, f.depth, "filter", table) for f in atoms]
            elif self.depth >= 2:
                choices = {h.name: atoms for h in fh}
                made = [self.instantiate(t, a, sum(a[h.name].depth for h in fh), "filter", table)
                        for a in self._product(t, choices, key, distinct=[h.name for h in fh])]
            else:
                made = []
            out.extend(_sample([m for m in made if m.depth <= self.depth], self.cap, self.seed, t.id, key))
        self._filters[key] = out
        return out

    def _subqueries(self, t, table):
        if self.depth < 2 or table.id_type is None:
            return []
        qh = t.holes_of("query")[0]
        jh = t.holes_of("join")[0]
        made = []
        for inner in self.tables:
            if inner.ref == table.ref:
                continue
            joins = [p for p in inner.fields if p.type == table.id_type]
            if not joins:
                continue
            inner_qs = [q for q in self.base_queries(inner) if q.depth <= self.depth - 1]
            for j in joins:
                for q in inner_qs:
                    made.append(self.instantiate(t, {qh.name: q, jh.name: Phrase(_canon(j), j.name)},
                                                 q.depth + 1, "filter", table))
        return _sample(made, self.cap, self.seed, t.id, table.ref)

    # -- queries ----------------------------------------------------------
    def base_queries(self, table: Table):
        """Table alone or with a filter (kind ``plain``)."""
        out = []
        for t in self.by_cat.get("query-phrase", []):
            if t.holes_of("query"):
                continue
            th = t.holes_of("table")
            if not th:
                continue
            fh = t.holes_of("filter")
            tphrase = Phrase(table.plural, str(table.ref) + "()")
            if not fh:
                out.append(self.instantiate(t, {th[0].name: tphrase}, 0, "plain", table))
                continue
            for f in self.filters(table):
                out.append(self.instantiate(t, {th[0].name: tphrase, fh[0].name: f},
                                            f.depth, "plain", table))
        return out

    def queries(self, table: Table):
        key = str(table.ref)
        if key in self._queries:
            return self._queries[key]
        plain = self.base_queries(table)
        ranked, final = [], []
        for t in self.by_cat.get("query-phrase", []):
            qh = t.holes_of("query")
            if not qh:
                continue
            kind = _wrapper_kind(t)
            inner = plain if kind == "ranked" else plain + ranked
            inner = [q for q in inner if q.depth <= self.depth - 1]
            made = []
            for q in inner:
                choices = {qh[0].name: [q]}
                for h in t.holes:
                    if h.category == "param":
                        choices[h.name] = [Phrase(_canon(p), p.name) for p in table.fields
                                           if type_matches(p.type, t.guard)]
                    elif h.category == "number":
                        choices[h.name] = [Phrase(str(n), str(n), slots=((str(n), T.Number(n)),))
                                           for n in NUMBERS]
                    elif h.category == "value":
                        ty = S.parse_type(h.type_guard) if h.type_guard else T.LOCATION
                        choices[h.name] = self.values(ty)
                if any(not c for c in choices.values()):
                    continue
                for assign in self._product(t, choices, f"{key}.{q.src}"):
                    made.append(self.instantiate(t, assign, q.depth + 1, kind, table))
            # wrappers over the bare table are always kept; the rest is sampled
            simple = [m for m in made if m.depth == 1]
            made = simple + _sample([m for m in made if m.depth > 1], self.cap, self.seed, t.id, key)
            (ranked if kind == "ranked" else final).extend(made)
        self._queries[key] = plain + ranked + final
        return self._queries[key]

    # -- actions ------------------------------------------------------------
    def action_phrases(self, with_query=None, ref=None):
        """Action utterances with holes filled.

        ``with_query`` (a list of query phrases) builds ``q => a`` chains by
        putting a query in an entity hole; ``ref`` puts a reference phrase
        there instead and records which row it denotes."""
        out = []
        for aref, sig in self.actions:
            for ui, utt in enumerate(_utterances(sig)):
                names = [m.group(1) for m in ANY_HOLE_NAME.finditer(utt)]
                params = {n: sig.param(n) for n in names}
                if any(p is None for p in params.values()):
                    continue
                targets = [None] if with_query is None and ref is None else \
                    [n for n in names if isinstance(params[n].type, T.EntityType)]
                for target in targets:
                    fillers = {}
                    for n in names:
                        if n == target:
                            continue
                        fillers[n] = self.values(params[n].type, None, params[n], key=f"{aref}.{n}")
                    if any(not v for v in fillers.values()):
                        continue
                    if target is not None and with_query is not None:
                        absent = [p.name for p in sig.in_params if p.required and p.name not in names]
                        if absent:
                            continue
                        heads = [q for q in with_query if q.table.id_type == params[target].type]
                    elif target is not None:
                        heads = [Phrase(ph, "", meta=(("ref", k), ("ref_phrase", ph),
                                                      ("type", params[target].type)))
                                 for ph, k in REF_PHRASES]
                    else:
                        heads = [None]
                    order = [n for n in names if n != target]
                    combos = list(itertools.product(*(fillers[n] for n in order)))
                    combos = _sample(combos, self.cap, self.seed, "action", aref, ui, target)
                    for head in heads:
                        for combo in combos:
                            out.append(self._action_phrase(aref, sig, utt, target, head,
                                                           dict(zip(order, combo))))
        return out

    def _action_phrase(self, aref, sig, utt, target, head, fill):
        text, slots = utt, []

        def sub(m):
            n = m.group(1)
            if n == target:
                slots.extend(head.slots)
                return head.text
            slots.extend(fill[n].slots)
            return fill[n].text
        text = _clean(ANY_HOLE_NAME.sub(sub, utt))
        args = []
        for p in sig.in_params:
            if p.name == target:
                args.append(f"{p.name}={'id' if head.src else '??'}")
            elif p.name in fill:
                args.append(f"{p.name}={fill[p.name].src}")
            elif p.required:
                args.append(f"{p.name}=??")
        action_src = f"{aref}({', '.join(args)})"
        if target is not None and head.src:
            return Phrase(text, f"{head.src} => {action_src}", head.depth, tuple(slots),
                          head.tids, "chain", head.table,
                          parts=(("query", head.src), ("action", action_src)))
        meta = head.meta if head is not None else ()
        return Phrase(text, action_src, 0, tuple(slots), (), "action", None,
                      meta=meta + (("target", target),))

    # -- top level ----------------------------------------------------------
    def statements(self):
        """(Phrase, template) pairs for every top-level statement."""
        all_queries = []
        for table in self.tables:
            all_queries.extend(self.queries(table))
        chains = None
        out = []
        for t in self.by_cat.get("statement", []):
            h = t.holes[0] if t.holes else None
            if h is None:
                continue
            if h.category == "query":
                kinds = (t.guard or "plain|ranked|aggregate|projection").split("|")
                for q in all_queries:
                    if q.kind in kinds:
                        out.append((self.instantiate(t, {h.name: q}, q.depth, "query"), t))
            elif h.category == "chain":
                if chains is None:
                    heads = [q for q in all_queries if q.kind in ("plain", "ranked")]
                    chains = self.action_phrases(with_query=heads)
                for c in chains:
                    out.append((self.instantiate(t, {h.name: c}, c.depth, "chain"), t))
        actions = None
        for t in self.by_cat.get("action-phrase", []):
            if actions is None:
                actions = self.action_phrases()
            h = t.holes[0]
            for a in actions:
                out.append((self.instantiate(t, {h.name: a}, 0, "action"), t))
        return out


ANY_HOLE_NAME = re.compile(r"\$\{(\w+)\}")


def _canon(p):
    return p.annotation("canonical") or p.name.replace("_", " ")


def _wrapper_kind(t):
    c = t.constructor.lstrip()
    if c.startswith("aggregate"):
        return "aggregate"
    if c.startswith("["):
        return "projection"
    return "ranked"


def _literal_for(raw, ty):
    try:
        if ty == T.NUMBER:
            return T.Number(float(raw))
        if ty == T.STRING:
            return T.String(raw)
        if ty == T.DATE:
            return T.Date.parse(raw)
        v = S.parse_value(raw)
        return v if T.value_matches(v, ty) else None
    except (DlgcError, ValueError):
        return None


def _program_text(src):
    return f"@Transaction.Execute; {src};"


def _finish(ph: Phrase, registry, context="act: none", **meta):
    """Parse, check and canonicalize a statement source; None if rejected."""
    prog = S.parse_program(_program_text(ph.src) if not ph.src.startswith("@Transaction.")
                           else ph.src)
    typed = typecheck_program(prog, registry)
    canon = canonicalize_program(typed.program)
    m = {"depth": ph.depth, "templates": ph.tids, "slots": ph.slots, "kind": "plain"}
    m.update(meta)
    return SynthPair(context, ph.text, S.print_program(canon), m)


def expand(registry: Registry, templates, depth: int = 2, limit: int = 5000, seed: int = 0,
           stats: Optional[dict] = None) -> list:
    """Synthesize context-free pairs up to ``depth`` and at most ``limit`` of them."""
    if limit <= 0:
        return []
    ex = Expander(registry, templates, depth, seed)
    groups, seen = {}, set()
    rejected = 0
    for ph, t in ex.statements():
        if ph.depth > depth:
            continue
        try:
            pair = _finish(ph, registry)
        except DlgcError as e:
            rejected += 1
            log.debug("rejected %r: %s", ph.src, e)
            continue
        k = (pair.utterance, pair.program)
        if k in seen:
            continue
        seen.add(k)
        groups.setdefault((pair.depth, tuple(sorted(set(pair.meta["templates"])))), []).append(pair)
    if stats is not None:
        stats["rejected"] = rejected
        stats["groups"] = len(groups)
    order = sorted(groups)
    for key in order:
        bucket = sorted(groups[key], key=lambda p: (p.utterance, p.program))
        _rng(seed, "bucket", key).shuffle(bucket)
        groups[key] = bucket
    out, i = [], 0
    while len(out) < limit:
        took = False
        for key in order:
            if i < len(groups[key]):
                out.append(groups[key][i])
                took = True
                if len(out) >= limit:
                    break
        if not took:
            break
        i += 1
    return out


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------

CONSTRUCTS = tuple(
    [f"cmp.{op}.{cls}" for cls in ("length", "duration", "temperature", "mass")
     for op in ("==", ">=", "<=")]
    + ["cmp.number.>=", "cmp.number.<=", "cmp.number.==", "cmp.date", "cmp.currency",
       "eq.entity", "eq.enum", "contains", "in_array", "substr", "dontcare", "not", "and", "or",
       "sort.asc", "sort.desc", "slice", "distance",
       "aggregate.count", "aggregate.min", "aggregate.max", "aggregate.sum", "aggregate.avg",
       "projection", "subquery", "monitor", "chain", "action"])


def constructs_of(prog: A.Program) -> set:
    found = set()

    def query(q):
        if q.sort:
            found.add(f"sort.{q.sort.direction}")
        if q.slice:
            found.add("slice")
        if q.computed:
            found.add("distance")
        if q.aggregate:
            found.add(f"aggregate.{q.aggregate.op}")
        if q.projection is not None:
            found.add("projection")
        for node in A.walk_filter(q.filter):
            if isinstance(node, A.And):
                found.add("and")
            elif isinstance(node, A.Or):
                found.add("or")
            elif isinstance(node, A.Not):
                found.add("not")
            elif isinstance(node, A.DontCare):
                found.add("dontcare")
            elif isinstance(node, A.Subquery):
                found.add("subquery")
                query(node.query)
            elif isinstance(node, A.Atom):
                v = node.rhs
                if node.op in ("contains", "in_array", "substr"):
                    found.add(node.op)
                elif isinstance(v, T.Measure):
                    found.add(f"cmp.{node.op}.{v.unit_class}")
                elif isinstance(v, T.Number):
                    found.add(f"cmp.number.{node.op}")
                elif isinstance(v, (T.Date, A.EnvRef)) and node.op != "==":
                    found.add("cmp.date")
                elif isinstance(v, T.Currency):
                    found.add("cmp.currency")
                elif isinstance(v, T.Entity):
                    found.add("eq.entity")
                elif isinstance(v, T.Enum):
                    found.add("eq.enum")

    for s in prog.statements:
        if isinstance(s, A.StreamStatement):
            found.add("monitor")
            query(s.monitor)
            continue
        if s.query is not None:
            query(s.query)
        if s.action is not None:
            found.add("chain" if s.query is not None else "action")
    return found


def coverage(pairs) -> dict:
    """Construct -> number of pairs exercising it (every construct listed)."""
    counts = dict.fromkeys(CONSTRUCTS, 0)
    for p in pairs:
        for c in constructs_of(S.parse_program(p.program)):
            if c in counts:
                counts[c] += 1
    return counts


def template_constructs(templates) -> set:
    """Constructs that some template can produce (static check of a library)."""
    found = set()
    for t in templates:
        c = t.constructor
        g = t.guard or ""
        if t.category == "filter-phrase":
            for cls in ("length", "duration", "temperature", "mass"):
                if f"Measure({cls})" in g:
                    for op in ("==", ">=", "<="):
                        if f" {op} " in c:
                            found.add(f"cmp.{op}.{cls}")
            for op in ("==", ">=", "<="):
                if g == "Number" and f" {op} " in c:
                    found.add(f"cmp.number.{op}")
            if g == "Date":
                found.add("cmp.date")
            if g == "Currency":
                found.add("cmp.currency")
            if "Entity" in g and " == " in c:
                found.add("eq.entity")
            if "Enum" in g and " == " in c:
                found.add("eq.enum")
            for key in ("contains", "in_array", "substr", "dontcare"):
                if c.startswith(key + "("):
                    found.add(key)
            if c.startswith("!") or "!(" in c:
                found.add("not")
            if "&&" in c:
                found.add("and")
            if "||" in c:
                found.add("or")
            if c.startswith("any("):
                found.add("subquery")
        elif t.category == "query-phrase":
            if " asc of" in c:
                found.add("sort.asc")
            if " desc of" in c:
                found.add("sort.desc")
            if "[1:" in c:
                found.add("slice")
            if "distance(" in c:
                found.add("distance")
            m = re.match(r"aggregate\((\w+)", c)
            if m:
                found.add(f"aggregate.{m.group(1)}")
            if c.startswith("["):
                found.add("projection")
        elif t.category == "statement":
            if c.startswith("monitor("):
                found.add("monitor")
            elif "=>" in c:
                found.add("chain")
        elif t.category == "action-phrase":
            found.add("action")
    return found


# ---------------------------------------------------------------------------
# Dialogue-turn generation (shared by the simulator and the parser index)
# ---------------------------------------------------------------------------

class TurnGenerator:
    """Produces user turns that fit a dialogue state."""

    def __init__(self, registry, templates, seed=0, depth=2):
        self.ex = Expander(registry, templates, depth, seed)
        self.r = registry
        self.turns = [t for t in templates if t.category == "dialogue-turn"]
        self._ref_phrases = None

    def fixed(self, program):
        return [t for t in self.turns if t.constructor == program]

    def by_hole(self, cat):
        return [t for t in self.turns if t.holes_of(cat)]

    def acts(self, program, context):
        return [SynthPair(context, t.pattern, program, {"kind": "plain", "templates": (t.id,),
                                                       "depth": 0, "slots": ()})
                for t in self.fixed(program)]

    def refs(self, state: DialogueState, runtime):
        """Reference actions over completed query results in ``state``."""
        out = []
        ctx = summarize(state)
        if self._ref_phrases is None:
            self._ref_phrases = self.ex.action_phrases(ref=True)
        phrases = self._ref_phrases
        for t in self.by_hole("refaction"):
            h = t.holes[0]
            for ph in phrases:
                k = dict(ph.meta).get("ref")
                ety = dict(ph.meta).get("type")
                target = dict(ph.meta).get("target")
                row = _ref_row(state, ety, k)
                if row is None:
                    continue
                text = _clean(PATTERN_HOLE.sub(lambda m: ph.text, t.pattern))
                src = ph.src.replace(f"{target}=??", f"{target}={S.print_value(row)}", 1)
                try:
                    pair = _finish(Phrase(text, src, 0, ph.slots, (t.id,)), self.r, ctx,
                                   kind="ref", refs=((dict(ph.meta)["ref_phrase"], k, row),))
                except DlgcError:
                    continue
                out.append(pair)
        return out

    def answers(self, state: DialogueState):
        out = []
        ctx = summarize(state)
        for dom in state.recent_domains([d for d, p in state.outstanding.items()
                                         if p.phase == "slot_filling"])[:1]:
            stmt = state.outstanding[dom].statement
            sig = self.r.function(stmt.action.target)
            pname = A.missing_params(stmt, sig)[0]
            p = sig.param(pname)
            vals = self.ex.values(p.type, None, p, key=f"answer.{stmt.action.target}.{pname}")
            for t in self.by_hole("answer"):
                for v in vals:
                    assign = {t.holes_of("answer")[0].name: v}
                    for h in t.holes_of("param"):
                        assign[h.name] = Phrase(_canon(p), pname)
                    text = _clean(PATTERN_HOLE.sub(lambda m: assign[m.group(1)].text, t.pattern))
                    args = tuple((k, v.slots[0][1] if k == pname and v.slots else x)
                                 for k, x in stmt.action.args)
                    if not v.slots:
                        continue
                    new = replace(stmt, action=replace(stmt.action, args=args))
                    prog = A.Program(A.ActRef("Transaction", "Execute"), (new,))
                    try:
                        typed = typecheck_program(prog, self.r)
                    except DlgcError:
                        continue
                    canon = S.print_program(canonicalize_program(typed.program))
                    out.append(SynthPair(ctx, text, canon, {
                        "kind": "answer", "templates": (t.id,), "depth": 0, "slots": v.slots,
                        "param": pname if t.holes_of("param") else None}))
        return out

    def refinements(self, state: DialogueState):
        out = []
        ctx = summarize(state)
        for dom in state.recent_domains(list(state.completed))[:1]:
            item = state.completed[dom]
            q = item.statement.query
            if item.kind != "query" or q is None or q.aggregate is not None or \
                    q.projection is not None or item.statement.action is not None:
                continue
            table = next((t for t in self.ex.tables if t.ref == q.base), None)
            if table is None:
                continue
            for t in self.by_hole("filter"):
                h = t.holes_of("filter")[0]
                for f in self.ex.atoms(table):
                    if A.filter_fields(S.parse_filter(f.src)) & A.filter_fields(q.filter):
                        continue
                    text = _clean(PATTERN_HOLE.sub(lambda m: f.text, t.pattern))
                    new_f = S.parse_filter(f.src)
                    merged = new_f if q.filter == A.TRUE else A.And((q.filter, new_f))
                    stmt = A.Statement(replace(q, filter=merged))
                    prog = A.Program(A.ActRef("Transaction", "Execute"), (stmt,))
                    try:
                        typed = typecheck_program(prog, self.r)
                    except DlgcError:
                        continue
                    canon = S.print_program(canonicalize_program(typed.program))
                    out.append(SynthPair(ctx, text, canon, {
                        "kind": "refine", "templates": (t.id,) + f.tids, "depth": 1,
                        "slots": f.slots, "filter": f.src, "base": str(q.base)}))
        return out


def _ref_row(state, ety, k):
    """Entity denoted by reference ``k`` (0 = it/that) in the completed results."""
    for dom in state.recent_domains(list(state.completed)):
        item = state.completed[dom]
        if item.kind != "query":
            continue
        ids = [r.get("id") for r in item.rows]
        if not ids or not all(isinstance(x, T.Entity) for x in ids):
            continue
        if T.EntityType(ids[0].entity_type) != ety:
            continue
        if k == 0:
            return ids[0] if item.count == 1 else None
        return ids[k - 1] if k <= len(ids) else None
    return None


def _runtime_for(registry, env=None):
    from .skills import snapshot
    return Runtime(snapshot(registry), env or Env())


def _step(state, runtime, program_text):
    prog = S.parse_program(program_text)
    typed = typecheck_program(prog, runtime.registry)
    st = apply_user_turn(state, typed, runtime)
    agent = agent_policy(st, runtime)
    return agent.state, agent


def turn_pairs(registry: Registry, templates, seed=0) -> list:
    """Contextual pairs for every dialogue-turn template, over representative
    states (a fresh query per table, a pending action per missing param)."""
    gen = TurnGenerator(registry, templates, seed)
    out = []
    empty = DialogueState()
    for prog in ("@Transaction.Greet;", "@Transaction.ThankYou;", "@Transaction.Cancel;"):
        out.extend(gen.acts(prog, summarize(empty)))
    for table in gen.ex.tables:
        rt = _runtime_for(registry)
        for src in (f"{table.ref}()", f"({table.ref}())[1:1]"):
            st, _ = _step(DialogueState(), rt, _program_text(src))
            out.extend(gen.refs(st, rt))
            if not src.startswith("("):
                out.extend(gen.refinements(st))
    for aref, sig in gen.ex.actions:
        for p in sig.in_params:
            if not p.required:
                continue
            rt = _runtime_for(registry)
            args = []
            for q in sig.in_params:
                if not q.required:
                    continue
                if q.name == p.name:
                    args.append(f"{q.name}=??")
                    continue
                vals = gen.ex.values(q.type, None, q, key=f"{aref}.{q.name}")
                if not vals:
                    break
                args.append(f"{q.name}={vals[0].src}")
            else:
                st, _ = _step(DialogueState(), rt, _program_text(f"{aref}({', '.join(args)})"))
                out.extend(gen.answers(st))
        if sig.confirmation:
            rt = _runtime_for(registry)
            args = []
            for q in sig.in_params:
                if q.required:
                    vals = gen.ex.values(q.type, None, q, key=f"{aref}.{q.name}")
                    if not vals:
                        break
                    args.append(f"{q.name}={vals[0].src}")
            else:
                st, _ = _step(DialogueState(), rt, _program_text(f"{aref}({', '.join(args)})"))
                for prog in ("@Transaction.Confirm;", "@Transaction.Reject;"):
                    out.extend(gen.acts(prog, summarize(st)))
    seen, uniq = set(), []
    for p in out:
        k = (p.context, p.utterance, p.program)
        if k not in seen:
            seen.add(k)
            uniq.append(p)
    return uniq


# ---------------------------------------------------------------------------
# Dialogue simulator
# ---------------------------------------------------------------------------

@dataclass
class DialogueTurn:
    context: str
    utterance: str
    program: str
    agent_act: str
    agent_utterance: str
    user_act: str = ""


@dataclass
class Transcript:
    id: str
    turns: list

    def to_text(self):
        lines = [f"# dialogue {self.id}"]
        for t in self.turns:
            lines += [f"C: {t.context}", f"U: {t.utterance}", f"P: {t.program}",
                      f"A: {t.agent_act} | {t.agent_utterance}"]
        return "\n".join(lines) + "\n"

    def pairs(self):
        return [SynthPair(t.context, t.utterance, t.program, {"dialogue": self.id})
                for t in self.turns]


def _applicable(state: DialogueState, step, probs):
    out = {}
    if any(p.phase == "slot_filling" for p in state.outstanding.values()):
        return {"fill": probs["fill"]}
    if any(p.phase == "awaiting_confirmation" for p in state.outstanding.values()):
        return {"confirm": probs["confirm"], "reject": probs["reject"]}
    out["new"] = probs["new"]
    if any(c.kind == "query" and c.statement.action is None for c in state.completed.values()):
        out["refine"] = probs["refine"]
    if step > 0:
        out["thank"] = probs["thank"]
    return out


def synthesize_dialogues(registry: Registry, templates, n: int, seed: int = 0,
                         probs: Optional[dict] = None, depth: int = 2,
                         pool: Optional[list] = None) -> list:
    """Simulated user x agent policy; returns ``n`` transcripts."""
    if n <= 0:
        return []
    probs = dict(DEFAULT_ACT_PROBS, **(probs or {}))
    gen = TurnGenerator(registry, templates, seed, depth)
    if pool is None:
        pool = expand(registry, templates, depth, 4000, seed)
    requests = []
    for p in pool:
        prog = S.parse_program(p.program)
        s = prog.statements[0]
        if isinstance(s, A.StreamStatement):
            continue
        if s.action is None or (s.query is None and not _takes_entities(registry, s)):
            requests.append(p)
    out = []
    for d in range(n):
        rng = _rng(seed, "dialogue", d)
        rt = _runtime_for(registry)
        state = DialogueState()
        turns = []
        step = 0
        while True:
            options = _applicable(state, step, probs)
            if step >= MAX_DIALOGUE_TURNS and "thank" in options:
                options = {"thank": 1.0}
            cand = None
            while options and cand is None:
                acts = sorted(options)
                act = rng.choices(acts, weights=[options[a] for a in acts])[0]
                cand = _candidate(act, state, rt, gen, requests, rng)
                if cand is None:
                    del options[act]
            if cand is None:
                break
            ctx = summarize(state)
            state, agent = _step(state, rt, cand.program)
            turns.append(DialogueTurn(ctx, cand.utterance, cand.program, agent.label,
                                      agent.utterance, act))
            step += 1
            if act == "thank":
                break
        out.append(Transcript(f"{seed}-{d}", turns))
    return out


def _takes_entities(registry, stmt):
    sig = registry.function(stmt.action.target)
    return any(isinstance(p.type, T.EntityType) for p in sig.in_params)


def _candidate(act, state, rt, gen: TurnGenerator, requests, rng):
    ctx = summarize(state)
    if act == "new":
        refs = gen.refs(state, rt) if rng.random() < 0.5 else []
        if refs:
            return rng.choice(sorted(refs, key=lambda p: (p.utterance, p.program)))
        if not requests:
            return None
        p = rng.choice(requests)
        return SynthPair(ctx, p.utterance, p.program, dict(p.meta))
    if act == "refine":
        c = gen.refinements(state)
        return rng.choice(c) if c else None
    if act == "fill":
        c = gen.answers(state)
        return rng.choice(c) if c else None
    prog = {"confirm": "@Transaction.Confirm;", "reject": "@Transaction.Reject;",
            "thank": "@Transaction.ThankYou;"}[act]
    c = gen.acts(prog, ctx)
    return rng.choice(c) if c else None


# ---------------------------------------------------------------------------
# Parser index
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Slot:
    index: int


@dataclass(frozen=True)
class _Ref:
    k: int


ABSTRACT_TYPES = (T.Entity, T.String, T.Number, T.Measure, T.Currency, T.Date)


@dataclass
class IndexEntry:
    kind: str                       # plain | ref | answer | refine
    skeleton: object                # Program, filter, or None
    slot_types: tuple               # type of each <v> in key order
    depth: int
    program: str
    extra: dict = field(default_factory=dict)

    def sort_key(self):
        return (self.depth, self.program)


def _locate(toks, phrase_toks, start):
    n = len(phrase_toks)
    for i in range(start, len(toks) - n + 1):
        if toks[i:i + n] == phrase_toks:
            return i
    return -1


def _same(a, b):
    try:
        return T.values_equal(canonical_value(a), canonical_value(b))
    except DlgcError:
        return False


class ParserIndex:
    """Exact-match index from normalized, value-abstracted utterances to
    program skeletons."""

    def __init__(self, registry: Optional[Registry] = None):
        self.registry = registry
        self.entries = {}
        self.vocab = set()
        self.max_phrase = 1

    def __len__(self):
        return len(self.entries)

    # -- building ---------------------------------------------------------
    def add(self, pair: SynthPair):
        meta = pair.meta or {}
        kind = meta.get("kind", "plain")
        toks = norm_tokens(pair.utterance)
        spans = []                      # (start, end, label, payload)
        pos = 0
        for phrase, value in meta.get("slots", ()):
            if not isinstance(value, ABSTRACT_TYPES):
                continue
            pt = norm_tokens(phrase)
            i = _locate(toks, pt, pos)
            if i < 0 or not pt:
                continue
            spans.append((i, i + len(pt), "<v>", value))
            pos = i + len(pt)
            self._learn(pt)
        for phrase, k, _ in meta.get("refs", ()):
            pt = norm_tokens(phrase)
            i = _locate(toks, pt, 0)
            if i >= 0 and pt and not any(s[0] < i + len(pt) and i < s[1] for s in spans):
                spans.append((i, i + len(pt), f"<ref{k}>", k))
        spans.sort()
        prog = S.parse_program(pair.program)
        slot_vals = [s[3] for s in spans if s[2] == "<v>"]
        used = [False] * len(slot_vals)

        def to_slot(v):
            if isinstance(v, ABSTRACT_TYPES):
                for i, sv in enumerate(slot_vals):
                    if not used[i] and type(sv) is type(v) and _same(sv, v):
                        used[i] = True
                        return _Slot(i)
            return v

        extra = {}
        if kind == "answer":
            skeleton = None
            extra["param"] = meta.get("param")
            if len(slot_vals) != 1:
                return
            used[0] = True
        elif kind == "refine":
            skeleton = map_values(S.parse_filter(meta["filter"]), to_slot)
            extra["base"] = meta["base"]
        elif kind == "ref":
            ref_ents = {k: ent for _, k, ent in meta.get("refs", ())}

            def to_ref(v):
                for k, ent in ref_ents.items():
                    if isinstance(v, T.Entity) and _same(v, ent):
                        return _Ref(k)
                return to_slot(v)
            skeleton = map_values(prog, to_ref)
        else:
            skeleton = map_values(prog, to_slot)
        # only abstract spans that ended up bound
        keep = [s for s in spans if s[2] != "<v>" or used[slot_vals.index(s[3])]]
        key = self._key(toks, [(s[0], s[1], s[2]) for s in keep])
        types = tuple(_type_of(s[3]) for s in keep if s[2] == "<v>")
        if any(not u for u in used):
            # remap slot indices to the kept order
            order = [i for i, u in enumerate(used) if u]
            remap = {old: new for new, old in enumerate(order)}
            if skeleton is not None:
                skeleton = _remap_slots(skeleton, remap)
        entry = IndexEntry(kind, skeleton, types, meta.get("depth", 0), pair.program, extra)
        bucket = self.entries.setdefault(key, [])
        if not any(e.program == entry.program and e.kind == entry.kind for e in bucket):
            bucket.append(entry)
            bucket.sort(key=IndexEntry.sort_key)

    def _learn(self, pt):
        self.vocab.add(tuple(pt))
        self.max_phrase = max(self.max_phrase, len(pt))

    @staticmethod
    def _key(toks, spans):
        out, i = [], 0
        for s, e, label in sorted(spans):
            out.extend(toks[i:s])
            out.append(label)
            i = e
        out.extend(toks[i:])
        return " ".join(out)

    # -- lookup -------------------------------------------------------------
    def _spans(self, toks):
        spans = []
        n = len(toks)
        for i in range(n):
            for L in range(1, min(self.max_phrase, n - i) + 1):
                if tuple(toks[i:i + L]) in self.vocab:
                    spans.append((i, i + L, "<v>"))
            t = toks[i]
            if re.fullmatch(r"\d+(?:\.\d+)?|\d{4}-\d{2}-\d{2}(?:t\d{2}:\d{2})?", t):
                spans.append((i, i + 1, "<v>"))
                if i + 1 < n and (T.UNITS.lookup_ci(toks[i + 1]) is not None
                                  or re.fullmatch(r"[a-z]{3}", toks[i + 1])):
                    spans.append((i, i + 2, "<v>"))
        for phrase, k in REF_PHRASES:
            pt = phrase.split()
            for i in range(n - len(pt) + 1):
                if toks[i:i + len(pt)] == pt:
                    spans.append((i, i + len(pt), f"<ref{k}>"))
        return sorted(set(spans))

    def _selections(self, spans, limit=512):
        out = []

        def rec(i, last_end, chosen):
            if len(out) >= limit:
                return
            if i == len(spans):
                out.append(list(chosen))
                return
            rec(i + 1, last_end, chosen)
            s = spans[i]
            if s[0] >= last_end:
                chosen.append(s)
                rec(i + 1, s[1], chosen)
                chosen.pop()
        rec(0, 0, [])
        out.sort(key=len)
        return out

    def resolve(self, state, utterance, registry=None):
        registry = registry or self.registry
        orig = tokens(utterance)
        toks = [t.casefold() for t in orig]
        if not toks:
            raise Unparseable(utterance)
        for sel in self._selections(self._spans(toks)):
            key = self._key(toks, sel)
            for entry in self.entries.get(key, ()):
                phrases = [" ".join(orig[s:e]) for s, e, lab in sel if lab == "<v>"]
                refs = [int(lab[4:-1]) for s, e, lab in sel if lab.startswith("<ref")]
                try:
                    typed = self._bind(entry, phrases, refs, state, registry)
                except DlgcError:
                    continue
                if typed is not None:
                    return typed
        raise Unparseable(utterance)

    def _bind(self, entry, phrases, refs, state, registry):
        values = []
        if entry.kind == "answer":
            return _bind_answer(entry, phrases, state, registry)
        for ph, ty in zip(phrases, entry.slot_types):
            v = bind_value(ph, ty, registry)
            if v is None:
                return None
            values.append(v)
        if len(values) != len(entry.slot_types):
            return None

        def fill(v):
            if isinstance(v, _Slot):
                return values[v.index]
            if isinstance(v, _Ref):
                return _ref_value(state, v.k)
            return v
        if entry.kind == "refine":
            return _bind_refine(entry, (map_values(entry.skeleton, fill)), state, registry)
        prog = (map_values(entry.skeleton, fill))
        if _has_placeholder(prog):
            return None
        typed = typecheck_program(prog, registry)
        return replace(typed, program=canonicalize_program(typed.program))


def _has_placeholder(prog):
    bad = []
    map_values(prog, lambda v: bad.append(v) or v if v is None or isinstance(v, (_Slot, _Ref)) else v)
    return bool(bad)


def _remap_slots(node, remap):
    def fix(v):
        return _Slot(remap[v.index]) if isinstance(v, _Slot) else v
    return map_values(node, fix)


def _type_of(v):
    if isinstance(v, T.Entity):
        return T.EntityType(v.entity_type)
    return v.type


def bind_value(text, ty, registry):
    """Read a value of type ``ty`` from an utterance fragment (None if not)."""
    toks = text.split()
    try:
        if isinstance(ty, T.EntityType):
            return registry.lexicon.lookup(ty.name, text)
        if ty == T.STRING:
            return T.String(text)
        if ty == T.NUMBER:
            return T.Number(float(text)) if re.fullmatch(r"\d+(?:\.\d+)?", text) else None
        if ty == T.DATE:
            return T.Date.parse(text)
        if isinstance(ty, T.MeasureType) and len(toks) == 2:
            unit = T.UNITS.lookup_ci(toks[1])
            if unit is None or unit.unit_class != ty.unit_class:
                return None
            return T.Measure(float(toks[0]), unit.symbol)
        if ty == T.CURRENCY and len(toks) == 2:
            return T.Currency(float(toks[0]), toks[1])
    except (DlgcError, ValueError):
        return None
    return None


def _ref_value(state, k):
    for dom in state.recent_domains(list(state.completed)):
        item = state.completed[dom]
        if item.kind != "query":
            continue
        ids = [r.get("id") for r in item.rows]
        if not ids or not all(isinstance(x, T.Entity) for x in ids):
            continue
        if k == 0:
            return ids[0] if item.count == 1 else None
        return ids[k - 1] if k <= len(ids) else None
    return None


def _bind_answer(entry, phrases, state, registry):
    if len(phrases) != 1:
        return None
    filling = [d for d, p in state.outstanding.items() if p.phase == "slot_filling"]
    for dom in state.recent_domains(filling):
        stmt = state.outstanding[dom].statement
        sig = registry.function(stmt.action.target)
        missing = A.missing_params(stmt, sig)
        pname = entry.extra.get("param") or missing[0]
        if pname not in missing:
            continue
        v = bind_value(phrases[0], sig.param(pname).type, registry)
        if v is None:
            continue
        args = tuple((k, v if k == pname else x) for k, x in stmt.action.args)
        new = replace(stmt, action=replace(stmt.action, args=args))
        typed = typecheck_program(A.Program(A.ActRef("Transaction", "Execute"), (new,)), registry)
        return replace(typed, program=canonicalize_program(typed.program))
    return None


def _bind_refine(entry, new_filter, state, registry):
    for dom in state.recent_domains(list(state.completed)):
        item = state.completed[dom]
        q = item.statement.query
        if item.kind != "query" or q is None or str(q.base) != entry.extra["base"]:
            continue
        if q.aggregate is not None or q.projection is not None:
            continue
        merged = new_filter if q.filter == A.TRUE else A.And((q.filter, new_filter))
        stmt = A.Statement(replace(q, filter=merged))
        typed = typecheck_program(A.Program(A.ActRef("Transaction", "Execute"), (stmt,)), registry)
        return replace(typed, program=canonicalize_program(typed.program))
    return None


def build_parser_index(pairs, registry: Optional[Registry] = None) -> ParserIndex:
    idx = ParserIndex(registry)
    if registry is not None:
        for etype in registry.lexicon.types():
            for e in registry.lexicon.entries(etype):
                for name in (e.display,) + tuple(e.aliases):
                    pt = norm_tokens(name)
                    if pt:
                        idx._learn(pt)
    for p in pairs:
        idx.add(p)
    return idx


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_tsv(pairs, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, p in enumerate(pairs):
            row = [str(p.meta.get("id", i)), p.context, p.utterance, p.program]
            if any("\t" in x or "\n" in x for x in row):
                raise ValueError(f"pair {i} contains a tab or newline")
            fh.write("\t".join(row) + "\n")


def read_tsv(path) -> list:
    """Rows of a dataset file; raises ValueError on malformed lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            out.append(SynthPair(parts[1], parts[2], parts[3], {"id": parts[0], "line": lineno}))
    return out
