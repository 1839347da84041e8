"""A deliberately naive evaluator used as an oracle for the executor.

It shares only the AST and value classes with the package: unit conversion,
distance, text folding and comparison are reimplemented here from first
principles, and every row is re-scanned for every check.
"""
from __future__ import annotations

import datetime as dt
import math
import unicodedata

from dlgc import ast as A
from dlgc import types as T

# unit -> (factor, offset) into the base unit of its class
UNIT = {
    "m": (1, 0), "km": (1000, 0), "cm": (0.01, 0), "mm": (0.001, 0), "mi": (1609.344, 0),
    "ft": (0.3048, 0),
    "s": (1, 0), "ms": (0.001, 0), "min": (60, 0), "h": (3600, 0), "day": (86400, 0),
    "week": (604800, 0),
    "K": (1, 0), "C": (1, 273.15), "F": (5 / 9, 273.15 - 32 * 5 / 9),
    "kg": (1, 0), "g": (0.001, 0), "lb": (0.45359237, 0), "oz": (0.028349523125, 0),
}


class Empty(Exception):
    """Aggregate over no values."""


def base(m):
    f, o = UNIT[m.unit]
    return m.value * f + o


def fold(s):
    return " ".join(unicodedata.normalize("NFC", s).casefold().split())


def close(a, b):
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9)


def plain(v):
    """Value -> comparable python object."""
    if v is None:
        return None
    if isinstance(v, T.Boolean):
        return ("bool", v.value)
    if isinstance(v, T.Number):
        return ("num", v.value)
    if isinstance(v, T.Measure):
        return ("num", base(v))
    if isinstance(v, T.Currency):
        return ("cur", v.code, v.value)
    if isinstance(v, T.String):
        return ("str", fold(v.value))
    if isinstance(v, T.Date):
        return ("date", dt.datetime.combine(v.value, v.time or dt.time()))
    if isinstance(v, T.Time):
        return ("time", v.hour * 60 + v.minute)
    if isinstance(v, T.Location):
        return ("loc", v.lat, v.lon)
    if isinstance(v, T.Entity):
        return ("ent", v.entity_type, v.id)
    if isinstance(v, T.Enum):
        return ("enum", v.value)
    if isinstance(v, T.Array):
        return ("arr", tuple(plain(x) for x in v.values))
    raise TypeError(v)


def same(a, b):
    if a is None or b is None:
        return a is b
    if a[0] != b[0] or len(a) != len(b):
        return False
    if a[0] == "arr":
        return len(a[1]) == len(b[1]) and all(same(x, y) for x, y in zip(a[1], b[1]))
    for x, y in zip(a[1:], b[1:]):
        if isinstance(x, float) or isinstance(y, float):
            if not close(x, y):
                return False
        elif x != y:
            return False
    return True


def order(a, b):
    """-1, 0, 1 on ordered plain values."""
    if same(a, b):
        return 0
    return -1 if a[1:] < b[1:] else 1


def haversine(p, q):
    r = 6371008.8
    la1, la2 = math.radians(p.lat), math.radians(q.lat)
    a = (math.sin((la2 - la1) / 2) ** 2
         + math.cos(la1) * math.cos(la2) * math.sin(math.radians(q.lon - p.lon) / 2) ** 2)
    return 2 * r * math.asin(math.sqrt(min(1.0, a)))


def holds(f, row, tables):
    if isinstance(f, A.BoolFilter):
        return f.value
    if isinstance(f, A.And):
        return all(holds(c, row, tables) for c in f.children)
    if isinstance(f, A.Or):
        return any(holds(c, row, tables) for c in f.children)
    if isinstance(f, A.Not):
        return not holds(f.child, row, tables)
    if isinstance(f, A.DontCare):
        return True
    x = row.get(f.field)
    if x is None:
        return False
    if isinstance(f, A.Subquery):
        for inner in run(f.query, tables):
            y = inner.get(f.inner_field)
            if y is None:
                continue
            if f.op == "contains":
                if any(same(e, x) for e in y[1]):
                    return True
            elif f.op == "==" and same(y, x):
                return True
            elif f.op == ">=" and order(y, x) >= 0:
                return True
            elif f.op == "<=" and order(y, x) <= 0:
                return True
        return False
    rhs = plain(f.rhs)
    if f.op == "==":
        return same(x, rhs)
    if f.op == ">=":
        return order(x, rhs) >= 0
    if f.op == "<=":
        return order(x, rhs) <= 0
    if f.op == "contains":
        return any(same(e, rhs) for e in x[1])
    if f.op == "in_array":
        return any(same(x, e) for e in rhs[1])
    if f.op == "substr":
        return rhs[1] in x[1]
    raise ValueError(f.op)


def run(q, tables, here=None):
    """Evaluate ``q`` over ``tables`` (query name -> list of value dicts)."""
    rows = []
    for rec in tables[q.base.name]:
        row = {k: plain(v) for k, v in rec.items()}
        for name, d in q.computed:
            loc = rec.get(d.field)
            origin = here if isinstance(d.origin, A.EnvRef) else d.origin
            row[name] = None if loc is None else ("num", haversine(loc, origin))
        rows.append(row)
    rows.sort(key=lambda r: r["id"][2])
    rows = [r for r in rows if holds(q.filter, r, tables)]
    if q.sort is not None:
        # insertion sort: nulls last, then the key, then the id
        key, desc = q.sort.field, q.sort.direction == "desc"
        out = []
        for r in rows:
            i = len(out)
            while i > 0 and _before(r, out[i - 1], key, desc):
                i -= 1
            out.insert(i, r)
        rows = out
    if q.slice is not None:
        lo = q.slice.start - 1
        rows = rows[lo:lo + q.slice.count]
    if q.aggregate is not None:
        rows = [_aggregate(q.aggregate, rows)]
    if q.projection is not None:
        rows = [{k: v for k, v in r.items() if k in q.projection or k == "id"} for r in rows]
    return rows


def _before(a, b, key, desc):
    x, y = a.get(key), b.get(key)
    if x is None:
        return False
    if y is None:
        return True
    c = order(x, y)
    if desc:
        c = -c
    if c:
        return c < 0
    return a["id"][2] < b["id"][2]


def _aggregate(agg, rows):
    if agg.op == "count":
        return {"count": ("num", float(len(rows)))}
    vals = [r[agg.field] for r in rows if r.get(agg.field) is not None]
    if not vals:
        raise Empty(agg.op)
    if agg.op in ("min", "max"):
        best = vals[0]
        for v in vals[1:]:
            c = order(v, best)
            if (agg.op == "min" and c < 0) or (agg.op == "max" and c > 0):
                best = v
        return {agg.field: best}
    total = sum(v[-1] for v in vals)
    if agg.op == "avg":
        total /= len(vals)
    return {agg.field: vals[0][:-1] + (total,)}


def rows_match(got, want, ordered):
    """Compare package rows (Value dicts) with oracle rows (plain dicts)."""
    got = [{k: plain(v) for k, v in r.items() if v is not None} for r in got]
    want = [{k: v for k, v in r.items() if v is not None} for r in want]
    if len(got) != len(want):
        return False

    def eq(a, b):
        return a.keys() == b.keys() and all(same(a[k], b[k]) for k in a)

    if ordered:
        return all(eq(a, b) for a, b in zip(got, want))
    left = list(want)
    for g in got:
        for i, w in enumerate(left):
            if eq(g, w):
                del left[i]
                break
        else:
            return False
    return True
