"""Random program, filter and table generators shared by the test-suite.

Every generator takes a small ``R`` interface so the same code serves both
seeded loops (exact example counts, used by the acceptance suite) and
hypothesis strategies (shrinking, used by the module tests).
"""
from __future__ import annotations

import datetime as dt
import random

from hypothesis import strategies as st

from dlgc import ast as A
from dlgc import syntax as S
from dlgc import types as T
from dlgc.skills import DatasetBackend, RuleActionBackend
from dlgc.typecheck import Registry, resolve_library


class Rand:
    """Seeded source of choices."""

    def __init__(self, seed):
        self.r = random.Random(seed)

    def choice(self, seq):
        return self.r.choice(list(seq))

    def int(self, lo, hi):
        return self.r.randint(lo, hi)

    def chance(self, p):
        return self.r.random() < p

    def shuffle(self, seq):
        seq = list(seq)
        self.r.shuffle(seq)
        return seq


class Draw(Rand):
    """Hypothesis-backed source of choices."""

    def __init__(self, draw):
        self.draw = draw

    def choice(self, seq):
        return self.draw(st.sampled_from(list(seq)))

    def int(self, lo, hi):
        return self.draw(st.integers(lo, hi))

    def chance(self, p):
        return self.draw(st.integers(0, 99)) < int(p * 100)

    def shuffle(self, seq):
        return self.draw(st.permutations(list(seq)))


def strategy(fn, *args):
    """Turn ``fn(R, *args)`` into a hypothesis strategy."""
    return st.composite(lambda draw: fn(Draw(draw), *args))()


# ---------------------------------------------------------------------------
# Syntactic programs (no typing constraints)
# ---------------------------------------------------------------------------

FIELDS = ("rating", "cuisines", "geo", "title", "x_1", "size", "born")
CLASSES = ("Yelp", "com.twitter", "org.example.media", "A")
FUNCS = ("Restaurant", "Post", "Song", "T")
ENTITY_TYPES = ("Yelp:Cuisine", "A:B", "com.twitter:Tweet")
TEXT = "aZ09 _-\"\\'é中\n\t!"


def gen_text(r, max_len=8):
    return "".join(r.choice(TEXT) for _ in range(r.int(0, max_len)))


def gen_number(r):
    kind = r.int(0, 3)
    if kind == 0:
        return float(r.int(-1000, 1000))
    if kind == 1:
        return r.int(-10000, 10000) / 100
    if kind == 2:
        return r.int(1, 999) * 10.0 ** r.int(-9, 12)
    return 0.1 * r.int(0, 30)


def gen_value(r, kind=None):
    kind = kind or r.choice(("num", "str", "bool", "measure", "currency", "date", "time",
                             "loc", "entity", "enum"))
    if kind == "num":
        return T.Number(gen_number(r))
    if kind == "str":
        return T.String(gen_text(r))
    if kind == "bool":
        return T.Boolean(r.chance(.5))
    if kind == "measure":
        return T.Measure(gen_number(r), r.choice(sorted(T.UNITS.symbols())))
    if kind == "currency":
        return T.Currency(abs(gen_number(r)), r.choice(("usd", "eur", "jpy")))
    if kind == "date":
        d = dt.date(2000, 1, 1) + dt.timedelta(days=r.int(0, 10000))
        t = dt.time(r.int(0, 23), r.int(0, 59)) if r.chance(.3) else None
        return T.Date(d, t)
    if kind == "time":
        return T.Time(r.int(0, 23), r.int(0, 59))
    if kind == "loc":
        return T.Location(r.int(-9000, 9000) / 100, r.int(-18000, 18000) / 100,
                          gen_text(r, 4) if r.chance(.5) else "")
    if kind == "entity":
        ident = gen_text(r, 6) or "x"
        return T.Entity(r.choice(ENTITY_TYPES), ident, gen_text(r, 6) if r.chance(.5) else "")
    return T.Enum(r.choice(("cheap", "moderate", "a_b")))


def gen_array(r):
    kind = r.choice(("num", "str", "entity", "enum", "date"))
    vals = [gen_value(r, kind) for _ in range(r.int(0, 3))]
    if kind == "entity":
        vals = [T.Entity(vals[0].entity_type, v.id, v.display) for v in vals]
    return T.Array(tuple(vals))


def gen_operand(r):
    if r.chance(.1):
        return A.EnvRef(r.choice(("here", "now")))
    return gen_value(r)


def gen_atom(r, fields=FIELDS, depth=0):
    k = r.int(0, 9)
    f = r.choice(fields)
    if k <= 4:
        return A.Atom(f, r.choice(("==", ">=", "<=")), gen_operand(r))
    if k == 5:
        return A.Atom(f, "contains", gen_operand(r))
    if k == 6:
        return A.Atom(f, "in_array", gen_array(r))
    if k == 7:
        return A.Atom(f, "substr", T.String(gen_text(r)))
    if k == 8 or depth >= 2:
        return A.DontCare(f)
    q = gen_query(r, depth + 1, allow_agg=False)
    return A.Subquery(f, r.choice(A.SUBQUERY_OPS), q, r.choice(fields))


def gen_filter(r, depth=3, fields=FIELDS, qdepth=0):
    if depth <= 0 or r.chance(.35):
        return gen_atom(r, fields, qdepth)
    k = r.int(0, 2)
    if k == 2:
        return A.Not(gen_filter(r, depth - 1, fields, qdepth))
    kids = [gen_filter(r, depth - 1, fields, qdepth) for _ in range(r.int(2, 3))]
    cls = A.And if k == 0 else A.Or
    # the parser flattens a && b && c, so same-kind children are wrapped
    kids = [A.Not(c) if isinstance(c, cls) else c for c in kids]
    return cls(tuple(kids))


def gen_query(r, depth=0, allow_agg=True):
    base = A.FunctionRef(r.choice(CLASSES), r.choice(FUNCS))
    computed, sort = (), None
    flt = gen_filter(r, 2, FIELDS, depth) if r.chance(.7) else A.TRUE
    if r.chance(.2):
        # computed fields only exist through their use in the sort key
        origin = A.EnvRef("here") if r.chance(.5) else gen_value(r, "loc")
        computed = (("distance", A.Distance(r.choice(FIELDS), origin)),)
        sort = A.SortSpec("distance", r.choice(("asc", "desc")))
    elif r.chance(.3):
        sort = A.SortSpec(r.choice(FIELDS), r.choice(("asc", "desc")))
    sl = A.SliceSpec(r.int(1, 5), r.int(1, 5)) if r.chance(.3) else None
    agg = proj = None
    if allow_agg and r.chance(.2):
        op = r.choice(A.AGGREGATE_OPS)
        agg = A.Aggregate(op, None if op == "count" else r.choice(FIELDS))
    elif r.chance(.2):
        proj = tuple(r.shuffle(FIELDS)[:r.int(1, 3)])
    return A.Query(base, flt, computed, sort, sl, agg, proj)


def gen_action(r, with_query):
    target = A.FunctionRef(r.choice(CLASSES), r.choice(("Play", "Book", "Post")))
    # a bare zero-argument call reads as a query until it is type-checked
    names = r.shuffle(("song", "people", "status", "when_", "x"))[:r.int(0 if with_query else 1, 3)]
    args = []
    for n in names:
        k = r.int(0, 9)
        if k == 0:
            v = A.Missing
        elif k == 1 and with_query:
            v = A.VarRef(r.choice(("id", "rating", "title")))
        elif k == 2:
            v = A.EnvRef("now")
        elif k == 3:
            v = gen_array(r)
        else:
            v = gen_value(r)
        args.append((n, v))
    return A.Action(target, tuple(args))


def gen_statement(r):
    k = r.int(0, 9)
    if k <= 3:
        return A.Statement(gen_query(r))
    if k <= 5:
        return A.Statement(None, gen_action(r, False))
    if k <= 8:
        return A.Statement(gen_query(r), gen_action(r, True))
    return A.StreamStatement(gen_query(r, allow_agg=False), gen_action(r, True))


def gen_program(r):
    if r.chance(.15):
        act = r.choice(("Greet", "Cancel", "ThankYou", "Confirm", "Reject"))
        return A.Program(A.ActRef("Transaction", act), ())
    stmts = tuple(gen_statement(r) for _ in range(r.int(1, 3)))
    return A.Program(A.ActRef("Transaction", "Execute"), stmts)


# ---------------------------------------------------------------------------
# A typed test domain
# ---------------------------------------------------------------------------

LAB = """
class @Lab {
  loader @dataset(file="lab.jsonl");
  entity Item, Tag, Shop;
  query Item(out id : Entity(Item),
             out title : String,
             out score : Number,
             out size : Measure(length),
             out temp : Measure(temperature),
             out born : Date,
             out price : Currency,
             out level : Enum(low, mid, high),
             out tags : Array(Entity(Tag)),
             out shop : Entity(Shop),
             out spot : Location,
             out fresh : Boolean);
  query Shop(out id : Entity(Shop),
             out label : String,
             out rank : Number,
             out tags : Array(Entity(Tag)));
  action Order(in item : Entity(Item), in qty : Number, in note : String #[required=false]);
}
"""

TAGS = ("red", "green", "blue", "gold")
ITEM_FIELDS = ("title", "score", "size", "temp", "born", "price", "level", "tags", "shop",
               "spot", "fresh")


def lab_library():
    return S.parse_library(LAB)


def lab_registry(items=(), shops=()):
    """Registry holding @Lab with the given Item and Shop rows."""
    cdef = lab_library()[0]
    rc = resolve_library([cdef]).classes["Lab"]
    qsigs = {n: s for n, s in rc.functions.items() if s.kind == "query"}
    asigs = {n: s for n, s in rc.functions.items() if s.kind == "action"}
    qb = DatasetBackend("Lab", qsigs, {"Item": list(items), "Shop": list(shops)})
    ab = RuleActionBackend("Lab", asigs, [{"_action": "Order", "_fail_when": {"qty": {">=": 100}}}])
    return Registry().register(cdef, (qb, ab))


def tag(name):
    return T.Entity("Lab:Tag", name, name.title())


def shop(i):
    return T.Entity("Lab:Shop", f"s{i}", f"Shop {i}")


def item(i):
    return T.Entity("Lab:Item", f"i{i}", f"Item {i}")


LENGTH_UNITS = ("m", "km", "ft")
TEMP_UNITS = ("C", "F", "K")


def gen_field_value(r, name, nullable=True):
    """Random value for an Item column (small grids so ties happen)."""
    if nullable and r.chance(.12):
        return None
    if name == "title":
        return T.String(r.choice(("Apple pie", "apple", "Banana", "cherry tart", "Élan")))
    if name == "score":
        return T.Number(r.int(0, 6) / 2)
    if name == "size":
        u = r.choice(LENGTH_UNITS)
        v = {"m": r.int(0, 4) * 500, "km": r.int(0, 4) / 2, "ft": r.int(0, 3) * 1000}[u]
        return T.Measure(v, u)
    if name == "temp":
        u = r.choice(TEMP_UNITS)
        v = {"C": r.int(0, 4) * 10, "F": 32 + r.int(0, 4) * 18, "K": 273.15 + r.int(0, 4) * 10}[u]
        return T.Measure(v, u)
    if name == "born":
        return T.Date(dt.date(2020, 1, 1) + dt.timedelta(days=r.int(0, 5)))
    if name == "price":
        return T.Currency(r.int(1, 8) * 2.5, "usd")
    if name == "level":
        return T.Enum(r.choice(("low", "mid", "high")))
    if name == "tags":
        return T.Array(tuple(tag(t) for t in r.shuffle(TAGS)[:r.int(0, 3)]))
    if name == "shop":
        return shop(r.int(0, 3))
    if name == "spot":
        return T.Location(37 + r.int(0, 10) / 100, -122 + r.int(0, 10) / 100)
    if name == "fresh":
        return T.Boolean(r.chance(.5))
    raise KeyError(name)


def gen_items(r, n=None):
    n = r.int(0, 8) if n is None else n
    ids = r.shuffle(range(20))[:n]
    rows = []
    for i in ids:
        rec = {"id": item(i)}
        for f in ITEM_FIELDS:
            rec[f] = gen_field_value(r, f)
        rows.append(rec)
    return rows


def gen_shops(r):
    rows = []
    for i in range(r.int(0, 4)):
        rows.append({"id": shop(i), "label": T.String(f"Shop {i}"),
                     "rank": T.Number(r.int(0, 5)) if r.chance(.9) else None,
                     "tags": T.Array(tuple(tag(t) for t in r.shuffle(TAGS)[:r.int(0, 2)]))})
    return rows


ORDERED = ("score", "size", "temp", "born", "price")


def gen_lab_atom(r, fields=ITEM_FIELDS):
    f = r.choice(fields)
    if f in ORDERED:
        return A.Atom(f, r.choice(("==", ">=", "<=")), gen_field_value(r, f, False))
    if f == "title":
        if r.chance(.5):
            return A.Atom(f, "substr", T.String(r.choice(("apple", "AN", "tart", "é", "zz"))))
        return A.Atom(f, "==", gen_field_value(r, f, False))
    if f == "level":
        if r.chance(.4):
            return A.Atom(f, "in_array", T.Array(tuple(T.Enum(x) for x in r.shuffle(("low", "mid", "high"))[:2])))
        return A.Atom(f, "==", gen_field_value(r, f, False))
    if f == "tags":
        return A.Atom(f, "contains", tag(r.choice(TAGS)))
    if f == "shop":
        if r.chance(.4):
            return A.Atom(f, "in_array", T.Array((shop(r.int(0, 3)), shop(r.int(0, 3)))))
        return A.Atom(f, "==", shop(r.int(0, 3)))
    if f == "fresh":
        return A.Atom(f, "==", T.Boolean(r.chance(.5)))
    return A.DontCare(f)


def gen_shop_query(r):
    flt = A.TRUE
    if r.chance(.6):
        flt = A.Atom("rank", r.choice((">=", "<=")), T.Number(r.int(0, 5)))
    return A.Query(A.FunctionRef("Lab", "Shop"), flt)


def gen_lab_filter(r, depth=3, allow_sub=True):
    if depth <= 0 or r.chance(.3):
        if allow_sub and r.chance(.12):
            if r.chance(.5):
                return A.Subquery("shop", "==", gen_shop_query(r), "id")
            return A.Subquery("title", "==", gen_shop_query(r), "label")
        return gen_lab_atom(r)
    k = r.int(0, 2)
    if k == 2:
        return A.Not(gen_lab_filter(r, depth - 1, allow_sub))
    kids = tuple(gen_lab_filter(r, depth - 1, allow_sub) for _ in range(r.int(2, 3)))
    return (A.And if k == 0 else A.Or)(kids)


def gen_lab_query(r, allow_agg=True, depth=3):
    flt = gen_lab_filter(r, depth) if r.chance(.85) else A.TRUE
    computed, sort = (), None
    if r.chance(.15):
        computed = (("distance", A.Distance("spot", T.Location(37.05, -121.95))),)
        sort = A.SortSpec("distance", r.choice(("asc", "desc")))
    elif r.chance(.4):
        sort = A.SortSpec(r.choice(ORDERED + ("title",)), r.choice(("asc", "desc")))
    sl = A.SliceSpec(r.int(1, 4), r.int(1, 4)) if r.chance(.3) else None
    agg = proj = None
    if allow_agg and r.chance(.25):
        op = r.choice(A.AGGREGATE_OPS)
        fld = None
        if op in ("sum", "avg"):
            fld = r.choice(("score", "size", "price"))
        elif op != "count":
            fld = r.choice(ORDERED)
        agg = A.Aggregate(op, fld)
    elif r.chance(.2):
        proj = tuple(r.shuffle(ITEM_FIELDS)[:r.int(1, 3)])
    return A.Query(A.FunctionRef("Lab", "Item"), flt, computed, sort, sl, agg, proj)


def gen_lab_program(r):
    """A program that type-checks against :func:`lab_registry`."""
    stmts = []
    for _ in range(r.int(1, 2)):
        k = r.int(0, 3)
        if k == 0:
            args = [("item", item(r.int(0, 9))), ("qty", T.Number(r.int(1, 5)))]
            if r.chance(.5):
                args.append(("note", T.String(r.choice(("fast", "gift")))))
            stmts.append(A.Statement(None, A.Action(A.FunctionRef("Lab", "Order"),
                                                    tuple(r.shuffle(args)))))
        elif k == 1:
            q = gen_lab_query(r, allow_agg=False)
            q = A.Query(q.base, q.filter, q.computed, q.sort, q.slice)
            args = [("item", A.VarRef("id")), ("qty", T.Number(r.int(1, 3)))]
            stmts.append(A.Statement(q, A.Action(A.FunctionRef("Lab", "Order"),
                                                 tuple(r.shuffle(args)))))
        else:
            stmts.append(A.Statement(gen_lab_query(r)))
    return A.Program(A.ActRef("Transaction", "Execute"), tuple(stmts))


def permute(node, r):
    """Same program with commutative parts reordered."""
    if isinstance(node, A.Program):
        return A.Program(node.act, tuple(permute(s, r) for s in node.statements))
    if isinstance(node, A.Statement):
        return A.Statement(permute(node.query, r) if node.query else None,
                           permute(node.action, r) if node.action else None)
    if isinstance(node, A.Query):
        proj = tuple(r.shuffle(node.projection)) if node.projection else node.projection
        return A.Query(node.base, permute(node.filter, r), node.computed, node.sort, node.slice,
                       node.aggregate, proj)
    if isinstance(node, A.Action):
        return A.Action(node.target, tuple(r.shuffle(node.args)))
    if isinstance(node, (A.And, A.Or)):
        return type(node)(tuple(r.shuffle(permute(c, r) for c in node.children)))
    if isinstance(node, A.Not):
        return A.Not(permute(node.child, r))
    if isinstance(node, A.Atom) and node.op == "in_array":
        return A.Atom(node.field, node.op, T.Array(tuple(r.shuffle(node.rhs.values))))
    if isinstance(node, A.Subquery):
        return A.Subquery(node.field, node.op, permute(node.query, r), node.inner_field)
    return node
