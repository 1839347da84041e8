"""Concrete syntax: tokenizer, recursive-descent parser and printer.

The printer defines the canonical byte form of a program; ``parse_program``
accepts everything it prints, so ``parse_program(print_program(p)) == p``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

from . import ast as A
from . import types as T
from .errors import LexError, ParseError

__all__ = [
    "Token", "tokenize", "reconstruct", "parse_program", "parse_library", "parse_query",
    "parse_filter", "parse_value", "print_program", "print_query", "print_filter",
    "print_action", "print_statement", "print_value", "print_class", "print_library",
    "print_node", "fmt_number",
]

KEYWORDS = {
    "sort", "asc", "desc", "of", "aggregate", "monitor", "new", "enum", "true",
    "false", "any", "dontcare", "contains", "in_array", "substr", "abstract",
    "class", "extends", "entity", "query", "action", "loader", "in", "out",
    "dialogue", "acts",
}

PUNCT = ["#_[", "=>", "==", ">=", "<=", "&&", "||", "^^", "??", "#[",
         "!", "(", ")", "[", "]", "{", "}", ",", ";", ":", "=", "-", "."]

_WS = re.compile(r"(?:\s+|//[^\n]*)+")
_DNS = re.compile(r"@[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*")
_ENV = re.compile(r"\$[A-Za-z_][A-Za-z0-9_]*")
_DATE = re.compile(r"\d{4}-\d{2}-\d{2}(?:T\d{2}:\d{2})?(?![0-9A-Za-z_])")
_NUM = re.compile(r"\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")
_UNIT = re.compile(r"[A-Za-z]+")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_STRING = re.compile(r'"(?:[^"\\\n]|\\.)*"')


@dataclass(frozen=True)
class Token:
    kind: str       # ident keyword dns env number measure date string punct
    lexeme: str
    span: A.Span
    value: object = None
    leading: str = field(default="", compare=False)
    trailing: str = field(default="", compare=False)


def tokenize(text: str) -> list:
    tokens = []
    pos, line, line_start = 0, 1, 0
    n = len(text)

    def advance_ws(p):
        nonlocal line, line_start
        m = _WS.match(text, p)
        if not m:
            return p, ""
        chunk = m.group(0)
        for i, ch in enumerate(chunk):
            if ch == "\n":
                line += 1
                line_start = p + i + 1
        return m.end(), chunk

    pos, lead = advance_ws(0)
    while pos < n:
        span_of = lambda end: A.Span(line, pos - line_start + 1, pos, end)  # noqa: E731
        ch = text[pos]
        kind, value, end = None, None, None
        if ch == "@":
            m = _DNS.match(text, pos)
            if not m:
                raise LexError("'@' must start a dotted name", span_of(pos + 1))
            kind, end, value = "dns", m.end(), m.group(0)[1:]
        elif ch == "$":
            m = _ENV.match(text, pos)
            if not m:
                raise LexError("'$' must start an environment name", span_of(pos + 1))
            kind, end, value = "env", m.end(), m.group(0)[1:]
        elif ch == '"':
            m = _STRING.match(text, pos)
            if not m:
                raise LexError("unterminated string", span_of(n))
            kind, end = "string", m.end()
            try:
                value = json.loads(m.group(0))
            except json.JSONDecodeError as e:
                raise LexError(f"bad string escape: {e.msg}", span_of(end)) from None
        elif ch.isdigit():
            m = _DATE.match(text, pos)
            if m:
                kind, end = "date", m.end()
                try:
                    value = T.Date.parse(m.group(0))
                except ValueError:
                    raise LexError(f"bad date {m.group(0)!r}", span_of(end)) from None
            else:
                m = _NUM.match(text, pos)
                end = m.end()
                num = float(m.group(0))
                u = _UNIT.match(text, end)
                if u:
                    if u.group(0) not in T.UNITS:
                        raise LexError(f"unknown unit {u.group(0)!r}", span_of(u.end()))
                    kind, value, end = "measure", (num, u.group(0)), u.end()
                else:
                    kind, value = "number", num
        elif ch.isalpha() or ch == "_":
            m = _IDENT.match(text, pos)
            end = m.end()
            word = m.group(0)
            kind = "keyword" if word in KEYWORDS else "ident"
            value = word
        else:
            for p in PUNCT:
                if text.startswith(p, pos):
                    kind, end, value = "punct", pos + len(p), p
                    break
            if kind is None:
                raise LexError(f"unexpected character {ch!r}", span_of(pos + 1))
        tok_span = span_of(end)
        lexeme = text[pos:end]
        pos, trail = advance_ws(end)
        tokens.append(Token(kind, lexeme, tok_span, value, lead, trail))
        lead = ""
    return tokens


def reconstruct(tokens, text_if_empty=""):
    if not tokens:
        return text_if_empty
    return tokens[0].leading + "".join(t.lexeme + t.trailing for t in tokens)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_CMP_OPS = ("==", ">=", "<=")
_PRIM_TYPES = set(T.PRIMITIVES)


def _split_dns(name):
    if "." not in name:
        return None, name
    head, _, tail = name.rpartition(".")
    return head, tail


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0

    # -- token helpers ----------------------------------------------------
    def peek(self, k=0) -> Optional[Token]:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def _eof_span(self):
        n = len(self.text)
        line = self.text.count("\n", 0, n) + 1
        col = n - (self.text.rfind("\n", 0, n) + 1) + 1
        return A.Span(line, col, n, n)

    def error(self, msg, expected=()):
        tok = self.peek()
        if tok is None:
            raise ParseError(msg, self._eof_span(), expected, "end of input")
        raise ParseError(f"{msg}, found {tok.lexeme!r}", tok.span, expected, tok.lexeme)

    def at(self, value, k=0):
        t = self.peek(k)
        return t is not None and t.kind in ("punct", "keyword") and t.value == value

    def at_kind(self, kind, k=0):
        t = self.peek(k)
        return t is not None and t.kind == kind

    def accept(self, value):
        if self.at(value):
            self.i += 1
            return True
        return False

    def expect(self, value):
        if not self.at(value):
            self.error("syntax error", [repr(value)])
        tok = self.peek()
        self.i += 1
        return tok

    def expect_kind(self, kind, what=None):
        if not self.at_kind(kind):
            self.error("syntax error", [what or kind])
        tok = self.peek()
        self.i += 1
        return tok

    def ident(self, what="identifier"):
        return self.expect_kind("ident", what).value

    def done(self):
        return self.i >= len(self.toks)

    # -- programs ---------------------------------------------------------
    def program(self):
        if self.done():
            self.error("empty program: a dialogue act is required", ["dialogue act"])
        tok = self.expect_kind("dns", "dialogue act")
        ns, name = _split_dns(tok.value)
        if ns is None:
            raise ParseError("dialogue act must be @Namespace.Name", tok.span, ["dialogue act"], tok.lexeme)
        self.expect(";")
        act = A.ActRef(ns, name, span=tok.span)
        stmts = []
        while not self.done():
            stmts.append(self.statement())
        return A.Program(act, tuple(stmts), span=tok.span)

    def statement(self):
        start = self.peek()
        if self.accept("monitor"):
            self.expect("(")
            q = self.query()
            self.expect(")")
            self.expect("=>")
            act = self.action()
            self.expect(";")
            return A.StreamStatement(q, act, span=start.span)
        if self.at_kind("dns") and self.at("(", 1) and not self.at(")", 2):
            act = self.action()
            self.expect(";")
            return A.Statement(None, act, span=start.span)
        q = self.query()
        act = None
        if self.accept("=>"):
            act = self.action()
        self.expect(";")
        return A.Statement(q, act, span=start.span)

    def action(self):
        tok = self.expect_kind("dns", "action name")
        cls, name = _split_dns(tok.value)
        if cls is None:
            raise ParseError("function must be @Class.Name", tok.span, ["function name"], tok.lexeme)
        self.expect("(")
        args = []
        if not self.at(")"):
            while True:
                pname = self.ident("parameter name")
                self.expect("=")
                args.append((pname, self.operand(allow_var=True)))
                if not self.accept(","):
                    break
        self.expect(")")
        return A.Action(A.FunctionRef(cls, name, span=tok.span), tuple(args), span=tok.span)

    # -- queries ----------------------------------------------------------
    def query(self):
        start = self.peek()
        if self.at("["):
            self.i += 1
            fields = [self.ident("field name")]
            while self.accept(","):
                fields.append(self.ident("field name"))
            self.expect("]")
            self.expect("of")
            inner = self._aggregate_or_pipeline()
            return _replace(inner, projection=tuple(fields), span=start.span)
        return self._aggregate_or_pipeline()

    def _aggregate_or_pipeline(self):
        start = self.peek()
        if self.accept("aggregate"):
            self.expect("(")
            op = self.ident("aggregate operator")
            if op not in A.AGGREGATE_OPS:
                raise ParseError(f"unknown aggregate {op!r}", self.toks[self.i - 1].span,
                                 A.AGGREGATE_OPS, op)
            fld = None
            if op != "count":
                fld = self.ident("field name")
            self.expect("of")
            inner = self.pipeline()
            self.expect(")")
            return _replace(inner, aggregate=A.Aggregate(op, fld), span=start.span)
        return self.pipeline()

    def pipeline(self):
        start = self.peek()
        computed = {}
        if self.accept("sort"):
            self.expect("(")
            key = self.field_ref(computed)
            tok = self.peek()
            if not (self.at("asc") or self.at("desc")):
                self.error("syntax error", ["'asc'", "'desc'"])
            self.i += 1
            self.expect("of")
            q = self.base(computed)
            self.expect(")")
            q = _replace(q, sort=A.SortSpec(key, tok.value), span=start.span)
            if self.at("["):
                q = _replace(q, slice=self.slice_spec())
            return q
        if self.at("("):
            self.i += 1
            q = self.base(computed)
            self.expect(")")
            if self.at("["):
                q = _replace(q, slice=self.slice_spec())
            return q
        q = self.base(computed)
        if self.at("["):
            q = _replace(q, slice=self.slice_spec())
        return q

    def slice_spec(self):
        self.expect("[")
        start = self._int()
        count = 1
        if self.accept(":"):
            count = self._int()
        self.expect("]")
        if start < 1 or count < 1:
            raise ParseError("slice bounds must be >= 1", self.toks[self.i - 1].span,
                             ["positive integer"], None)
        return A.SliceSpec(start, count)

    def _int(self):
        tok = self.expect_kind("number", "integer")
        if not float(tok.value).is_integer():
            raise ParseError("expected an integer", tok.span, ["integer"], tok.lexeme)
        return int(tok.value)

    def base(self, computed):
        tok = self.expect_kind("dns", "query name")
        cls, name = _split_dns(tok.value)
        if cls is None:
            raise ParseError("function must be @Class.Name", tok.span, ["function name"], tok.lexeme)
        self.expect("(")
        self.expect(")")
        filters = []
        while self.at(","):
            if self._subquery_condition_follows():
                break
            self.i += 1
            filters.append(self.filter(computed))
        f = A.TRUE if not filters else (filters[0] if len(filters) == 1 else A.And(tuple(filters)))
        return A.Query(A.FunctionRef(cls, name, span=tok.span), f,
                       tuple(sorted(computed.items())), span=tok.span)

    def _subquery_condition_follows(self):
        # inside any(...): ", inner op outer )" or ", contains(inner, outer) )"
        if not getattr(self, "_in_any", 0):
            return False
        if (self.at_kind("ident", 1) and self.peek(2) is not None
                and self.peek(2).value in _CMP_OPS and self.at_kind("ident", 3) and self.at(")", 4)):
            return True
        return (self.at("contains", 1) and self.at("(", 2) and self.at_kind("ident", 3)
                and self.at(",", 4) and self.at_kind("ident", 5) and self.at(")", 6)
                and self.at(")", 7))

    def field_ref(self, computed):
        if self.at_kind("ident") and self.peek().value == "distance" and self.at("(", 1):
            self.i += 2
            fld = self.ident("field name")
            self.expect(",")
            origin = self.operand(allow_var=False)
            if not isinstance(origin, (T.Location, A.EnvRef)):
                self.error("distance origin must be a location", ["location"])
            self.expect(")")
            expr = A.Distance(fld, origin)
            if computed.get("distance", expr) != expr:
                raise ParseError("only one distance computation per query",
                                 self.toks[self.i - 1].span, ["the same distance(...)"], None)
            computed["distance"] = expr
            return "distance"
        return self.ident("field name")

    # -- filters ----------------------------------------------------------
    def filter(self, computed):
        parts = [self._and(computed)]
        while self.accept("||"):
            parts.append(self._and(computed))
        return parts[0] if len(parts) == 1 else A.Or(tuple(parts))

    def _and(self, computed):
        parts = [self._unary(computed)]
        while self.accept("&&"):
            parts.append(self._unary(computed))
        return parts[0] if len(parts) == 1 else A.And(tuple(parts))

    def _unary(self, computed):
        if self.accept("!"):
            return A.Not(self._unary(computed))
        if self.accept("("):
            f = self.filter(computed)
            self.expect(")")
            return f
        if self.accept("true"):
            return A.TRUE
        if self.accept("false"):
            return A.FALSE
        return self.atom(computed)

    def atom(self, computed):
        tok = self.peek()
        if tok is None:
            self.error("syntax error", ["filter"])
        if tok.kind == "keyword" and tok.value in ("contains", "substr", "in_array"):
            self.i += 1
            self.expect("(")
            fld = self.field_ref(computed)
            self.expect(",")
            rhs = self.operand(allow_var=False)
            self.expect(")")
            if tok.value == "in_array" and not isinstance(rhs, T.Array):
                raise ParseError("in_array needs an array literal", tok.span, ["array"], None)
            return A.Atom(fld, tok.value, rhs, span=tok.span)
        if self.accept("dontcare"):
            self.expect("(")
            fld = self.field_ref(computed)
            self.expect(")")
            return A.DontCare(fld, span=tok.span)
        if self.accept("any"):
            self.expect("(")
            self._in_any = getattr(self, "_in_any", 0) + 1
            try:
                inner = self.query()
            finally:
                self._in_any -= 1
            self.expect(",")
            if self.accept("contains"):
                self.expect("(")
                inner_field = self.ident("inner field")
                self.expect(",")
                outer = self.field_ref(computed)
                self.expect(")")
                op = "contains"
            else:
                inner_field = self.ident("inner field")
                optok = self.peek()
                if optok is None or optok.value not in _CMP_OPS:
                    self.error("syntax error", _CMP_OPS)
                self.i += 1
                op = optok.value
                outer = self.field_ref(computed)
            self.expect(")")
            return A.Subquery(outer, op, inner, inner_field, span=tok.span)
        if tok.kind != "ident":
            self.error("syntax error", ["filter"])
        fld = self.field_ref(computed)
        optok = self.peek()
        if optok is None or optok.kind != "punct" or optok.value not in _CMP_OPS:
            self.error("syntax error", _CMP_OPS)
        self.i += 1
        rhs = self.operand(allow_var=False)
        return A.Atom(fld, optok.value, rhs, span=tok.span)

    # -- values -----------------------------------------------------------
    def operand(self, allow_var):
        tok = self.peek()
        if tok is None:
            self.error("syntax error", ["value"])
        if tok.kind == "env":
            self.i += 1
            if tok.value not in ("here", "now"):
                raise ParseError(f"unknown environment constant ${tok.value}", tok.span,
                                 ["$here", "$now"], tok.lexeme)
            return A.EnvRef(tok.value)
        if allow_var and tok.kind == "ident":
            self.i += 1
            return A.VarRef(tok.value)
        if allow_var and self.accept("??"):
            return A.Missing
        return self.value()

    def value(self):
        tok = self.peek()
        if tok is None:
            self.error("syntax error", ["value"])
        k = tok.kind
        if k == "string":
            self.i += 1
            if self.accept("^^"):
                etype = self.entity_type_name()
                display = ""
                if self.accept("("):
                    display = self.expect_kind("string", "display name").value
                    self.expect(")")
                return T.Entity(etype, tok.value, display)
            return T.String(tok.value)
        if k in ("number", "measure") or self.at("-"):
            sign = -1.0 if self.accept("-") else 1.0
            t2 = self.peek()
            if t2 is None or t2.kind not in ("number", "measure"):
                self.error("syntax error", ["number"])
            self.i += 1
            if t2.kind == "number":
                return T.Number(sign * t2.value)
            return T.Measure(sign * t2.value[0], t2.value[1])
        if k == "date":
            self.i += 1
            return tok.value
        if self.accept("true"):
            return T.Boolean(True)
        if self.accept("false"):
            return T.Boolean(False)
        if self.accept("enum"):
            self.expect("(")
            v = self.ident("enum variant")
            self.expect(")")
            return T.Enum(v)
        if self.accept("new"):
            kind = self.ident("Location, Currency or Time")
            self.expect("(")
            try:
                if kind == "Location":
                    lat = self._signed()
                    self.expect(",")
                    lon = self._signed()
                    disp = ""
                    if self.accept(","):
                        disp = self.expect_kind("string", "display name").value
                    self.expect(")")
                    return T.Location(lat, lon, disp)
                if kind == "Currency":
                    amt = self._signed()
                    self.expect(",")
                    code = self.ident("currency code")
                    self.expect(")")
                    return T.Currency(amt, code)
                if kind == "Time":
                    h = self._int()
                    self.expect(",")
                    m = self._int()
                    self.expect(")")
                    return T.Time(h, m)
            except T.TypeMismatch as e:
                raise ParseError(str(e), tok.span, ["valid " + kind], None) from None
            raise ParseError(f"unknown constructor {kind}", tok.span,
                             ["Location", "Currency", "Time"], kind)
        if self.accept("["):
            vals = []
            if not self.at("]"):
                while True:
                    vals.append(self.value())
                    if not self.accept(","):
                        break
            self.expect("]")
            try:
                return T.Array(tuple(vals))
            except T.TypeMismatch as e:
                raise ParseError(str(e), tok.span, ["values of one type"], None) from None
        self.error("syntax error", ["value"])

    def _signed(self):
        sign = -1.0 if self.accept("-") else 1.0
        return sign * self.expect_kind("number", "number").value

    def entity_type_name(self):
        parts = [self._name_part()]
        while self.accept("."):
            parts.append(self._name_part())
        name = ".".join(parts)
        if self.accept(":"):
            name += ":" + self._name_part()
        return name

    def _name_part(self):
        tok = self.peek()
        if tok is None or tok.kind not in ("ident", "keyword"):
            self.error("syntax error", ["type name"])
        self.i += 1
        return tok.value

    # -- class libraries --------------------------------------------------
    def library(self):
        items = []
        while not self.done():
            if self.at("dialogue"):
                items.append(self.act_decl())
            else:
                items.append(self.class_def())
        return items

    def act_decl(self):
        start = self.expect("dialogue")
        self.expect("acts")
        ns = self.expect_kind("dns", "namespace").value
        self.expect("{")
        names = []
        while not self.accept("}"):
            names.append(self.ident("act name"))
            self.expect(";")
        return A.ActDecl(ns, tuple(names), span=start.span)

    def class_def(self):
        start = self.peek()
        abstract = self.accept("abstract")
        self.expect("class")
        name = self.expect_kind("dns", "class name").value
        extends = []
        if self.accept("extends"):
            extends.append(self.expect_kind("dns", "class name").value)
            while self.accept(","):
                extends.append(self.expect_kind("dns", "class name").value)
        annots = self.annotations()
        self.expect("{")
        entities, functions, loader = [], [], None
        while not self.accept("}"):
            if self.done():
                self.error("unterminated class body", ["'}'"])
            if self.accept("entity"):
                entities.append(self.ident("entity name"))
                while self.accept(","):
                    entities.append(self.ident("entity name"))
                self.expect(";")
            elif self.at("query") or self.at("action"):
                functions.append(self.function())
            elif self.accept("loader"):
                ltok = self.expect_kind("dns", "loader name")
                self.expect("(")
                args = []
                if not self.at(")"):
                    while True:
                        k = self.ident("loader argument")
                        self.expect("=")
                        args.append((k, self._literal()))
                        if not self.accept(","):
                            break
                self.expect(")")
                self.expect(";")
                loader = A.LoaderBinding(ltok.value, tuple(args))
            else:
                self.error("syntax error", ["'entity'", "'query'", "'action'", "'loader'", "'}'"])
        return A.ClassDef(name, abstract, tuple(extends), tuple(entities), tuple(functions),
                          loader, annots, span=start.span)

    def function(self):
        tok = self.peek()
        kind = tok.value
        self.i += 1
        name = self.ident("function name")
        self.expect("(")
        params = []
        if not self.at(")"):
            while True:
                params.append(self.param())
                if not self.accept(","):
                    break
        self.expect(")")
        annots = self.annotations()
        self.expect(";")
        confirm = False
        kept = []
        for k, v in annots:
            if k == "#confirm":
                confirm = bool(v)
            else:
                kept.append((k, v))
        return A.FunctionSig(kind, name, tuple(params), confirm, tuple(kept), span=tok.span)

    def param(self):
        if not (self.at("in") or self.at("out")):
            self.error("syntax error", ["'in'", "'out'"])
        direction = self.peek().value
        self.i += 1
        name = self.ident("parameter name")
        self.expect(":")
        ty = self.type_expr()
        annots = self.annotations()
        required = True
        kept = []
        for k, v in annots:
            if k == "#required":
                required = bool(v)
            else:
                kept.append((k, v))
        return A.Param(direction, name, ty, required, tuple(kept))

    def type_expr(self):
        tok = self.peek()
        name = self.ident("type")
        try:
            if name in _PRIM_TYPES:
                return T.PRIMITIVES[name]
            self.expect("(")
            if name == "Measure":
                ty = T.MeasureType(self.ident("unit class"))
            elif name == "Entity":
                ty = T.EntityType(self.entity_type_name())
            elif name == "Enum":
                vs = [self.ident("variant")]
                while self.accept(","):
                    vs.append(self.ident("variant"))
                ty = T.EnumType(tuple(vs))
            elif name == "Array":
                ty = T.ArrayType(self.type_expr())
            else:
                raise ParseError(f"unknown type {name}", tok.span, ["type"], name)
            self.expect(")")
            return ty
        except (T.TypeMismatch, T.UnknownUnit) as e:
            raise ParseError(str(e), tok.span, ["type"], name) from None

    def annotations(self):
        out = []
        while self.at("#_[") or self.at("#["):
            impl = self.peek().value == "#["
            self.i += 1
            key = self.ident("annotation key")
            self.expect("=")
            out.append(("#" + key if impl else key, self._literal()))
            self.expect("]")
        return tuple(out)

    def _literal(self):
        if self.at_kind("string"):
            return self.expect_kind("string").value
        if self.accept("true"):
            return True
        if self.accept("false"):
            return False
        return self._signed()


def _replace(q, **kw):
    from dataclasses import replace
    return replace(q, **kw)


def parse_program(text: str) -> A.Program:
    return A.validate(_Parser(text).program())


def parse_library(text: str) -> list:
    """Parse class definitions (and ``dialogue acts`` blocks)."""
    return _Parser(text).library()


def parse_query(text: str) -> A.Query:
    p = _Parser(text)
    q = p.query()
    if not p.done():
        p.error("trailing input", ["end of input"])
    return q


def parse_filter(text: str, computed=None) -> A.FilterExpr:
    p = _Parser(text)
    f = p.filter(computed if computed is not None else {})
    if not p.done():
        p.error("trailing input", ["end of input"])
    return f


def parse_value(text: str):
    p = _Parser(text)
    v = p.value()
    if not p.done():
        p.error("trailing input", ["end of input"])
    return v


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

def fmt_number(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(float(x))


def _qstr(s):
    return json.dumps(s, ensure_ascii=False)


def print_value(v) -> str:
    if v is A.Missing:
        return "??"
    if isinstance(v, A.VarRef):
        return v.name
    if isinstance(v, A.EnvRef):
        return "$" + v.name
    if isinstance(v, T.Boolean):
        return "true" if v.value else "false"
    if isinstance(v, T.Number):
        return fmt_number(v.value)
    if isinstance(v, T.String):
        return _qstr(v.value)
    if isinstance(v, T.Measure):
        return fmt_number(v.value) + v.unit
    if isinstance(v, T.Currency):
        return f"new Currency({fmt_number(v.value)}, {v.code})"
    if isinstance(v, T.Date):
        return v.iso()
    if isinstance(v, T.Time):
        return f"new Time({v.hour}, {v.minute})"
    if isinstance(v, T.Location):
        tail = f", {_qstr(v.display)}" if v.display else ""
        return f"new Location({fmt_number(v.lat)}, {fmt_number(v.lon)}{tail})"
    if isinstance(v, T.Entity):
        tail = f"({_qstr(v.display)})" if v.display else ""
        return f"{_qstr(v.id)}^^{v.entity_type}{tail}"
    if isinstance(v, T.Enum):
        return f"enum({v.value})"
    if isinstance(v, T.Array):
        return "[" + ", ".join(print_value(x) for x in v.values) + "]"
    raise TypeError(f"cannot print {v!r}")


def _field(name, computed):
    expr = computed.get(name)
    if isinstance(expr, A.Distance):
        return f"distance({expr.field}, {print_value(expr.origin)})"
    return name


def print_filter(f, computed=None) -> str:
    computed = computed or {}
    if isinstance(f, A.BoolFilter):
        return "true" if f.value else "false"
    if isinstance(f, A.Atom):
        fld = _field(f.field, computed)
        if f.op in _CMP_OPS:
            return f"{fld} {f.op} {print_value(f.rhs)}"
        return f"{f.op}({fld}, {print_value(f.rhs)})"
    if isinstance(f, A.DontCare):
        return f"dontcare({_field(f.field, computed)})"
    if isinstance(f, A.Subquery):
        fld = _field(f.field, computed)
        q = print_query(f.query)
        if f.op == "contains":
            return f"any({q}, contains({f.inner_field}, {fld}))"
        return f"any({q}, {f.inner_field} {f.op} {fld})"
    if isinstance(f, (A.And, A.Or)):
        sep = " && " if isinstance(f, A.And) else " || "
        return sep.join(
            f"({print_filter(c, computed)})" if isinstance(c, (A.And, A.Or)) else print_filter(c, computed)
            for c in f.children)
    if isinstance(f, A.Not):
        return f"!({print_filter(f.child, computed)})"
    raise TypeError(f"cannot print filter {f!r}")


def print_query(q: A.Query) -> str:
    computed = q.computed_map()
    core = f"{q.base}()"
    if q.filter != A.TRUE:
        core += ", " + print_filter(q.filter, computed)
    if q.sort is not None:
        core = f"sort({_field(q.sort.field, computed)} {q.sort.direction} of {core})"
    if q.slice is not None:
        if q.sort is None and q.filter != A.TRUE:
            core = f"({core})"
        core += f"[{q.slice.start}:{q.slice.count}]"
    if q.aggregate is not None:
        fld = f" {q.aggregate.field}" if q.aggregate.field else ""
        core = f"aggregate({q.aggregate.op}{fld} of {core})"
    if q.projection is not None:
        core = f"[{', '.join(q.projection)}] of {core}"
    return core


def print_action(a: A.Action) -> str:
    args = ", ".join(f"{k}={print_value(v)}" for k, v in a.args)
    return f"{a.target}({args})"


def print_statement(s) -> str:
    if isinstance(s, A.StreamStatement):
        return f"monitor({print_query(s.monitor)}) => {print_action(s.action)};"
    if s.query is None:
        return print_action(s.action) + ";"
    if s.action is None:
        return print_query(s.query) + ";"
    return f"{print_query(s.query)} => {print_action(s.action)};"


def print_program(p: A.Program) -> str:
    return " ".join([f"{p.act};"] + [print_statement(s) for s in p.statements])


def _annots(pairs):
    out = []
    for k, v in pairs:
        if isinstance(v, bool):
            lit = "true" if v else "false"
        elif isinstance(v, str):
            lit = _qstr(v)
        else:
            lit = fmt_number(v)
        out.append(f"#[{k[1:]}={lit}]" if k.startswith("#") else f"#_[{k}={lit}]")
    return "".join(" " + a for a in out)


def print_param(p: A.Param) -> str:
    ann = tuple(p.annotations)
    if not p.required:
        ann = (("#required", False),) + ann
    return f"{p.direction} {p.name} : {p.type}{_annots(ann)}"


def print_class(c) -> str:
    if isinstance(c, A.ActDecl):
        body = "".join(f"  {n};\n" for n in c.names)
        return f"dialogue acts @{c.namespace} {{\n{body}}}"
    head = ("abstract " if c.abstract else "") + f"class @{c.name}"
    if c.extends:
        head += " extends " + ", ".join("@" + e for e in c.extends)
    head += _annots(c.annotations)
    lines = [head + " {"]
    if c.loader is not None:
        args = ", ".join(f"{k}={_annots_lit(v)}" for k, v in c.loader.args)
        lines.append(f"  loader @{c.loader.kind}({args});")
    if c.entities:
        lines.append(f"  entity {', '.join(c.entities)};")
    for f in c.functions:
        ann = tuple(f.annotations)
        if f.confirmation:
            ann = (("#confirm", True),) + ann
        params = ", ".join(print_param(p) for p in f.params)
        lines.append(f"  {f.kind} {f.name}({params}){_annots(ann)};")
    lines.append("}")
    return "\n".join(lines)


def _annots_lit(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return _qstr(v)
    return fmt_number(v)


def print_library(items) -> str:
    return "\n\n".join(print_class(c) for c in items) + "\n"


def print_node(node) -> str:
    """Render a Program, statement, query, filter, value or class definition."""
    if isinstance(node, A.Program):
        return print_program(node)
    if isinstance(node, (A.ClassDef, A.ActDecl)):
        return print_class(node)
    if isinstance(node, (A.Statement, A.StreamStatement)):
        return print_statement(node)
    if isinstance(node, A.Query):
        return print_query(node)
    if isinstance(node, A.Action):
        return print_action(node)
    if isinstance(node, A.FilterExpr):
        return print_filter(node)
    return print_value(node)


# ``syntax.print(node)``; shadows the builtin only within this module
print = print_node  # noqa: A001


def parse_type(text: str):
    p = _Parser(text)
    t = p.type_expr()
    if not p.done():
        p.error("trailing input", ["end of input"])
    return t
