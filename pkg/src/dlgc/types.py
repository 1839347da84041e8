"""Builtin types, runtime values and their operators.

Type expressions and values are frozen dataclasses, so they hash, compare
structurally and can be shared freely.  Measures keep the magnitude in the
unit they were written in; comparisons and canonicalization go through the
unit table to the class's base unit.
"""
from __future__ import annotations

import datetime as _dt
import math
import re
import shlex
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

from .errors import (
    AmbiguousEntity,
    TypeMismatch,
    UnitClassMismatch,
    UnknownEntity,
    UnknownUnit,
    UnsupportedOperator,
)

UNIT_CLASSES = ("length", "duration", "temperature", "mass")
EARTH_RADIUS_M = 6371008.8
REL_TOL = 1e-9

_IDENT = re.compile(r"^[a-z_][a-z0-9_]*$")


# ---------------------------------------------------------------------------
# Type expressions
# ---------------------------------------------------------------------------

class TypeExpr:
    """Base class of static types."""

    def __str__(self):
        raise NotImplementedError


@dataclass(frozen=True)
class PrimType(TypeExpr):
    name: str

    def __str__(self):
        return self.name


BOOLEAN = PrimType("Boolean")
NUMBER = PrimType("Number")
STRING = PrimType("String")
CURRENCY = PrimType("Currency")
DATE = PrimType("Date")
TIME = PrimType("Time")
LOCATION = PrimType("Location")
PRIMITIVES = {t.name: t for t in (BOOLEAN, NUMBER, STRING, CURRENCY, DATE, TIME, LOCATION)}


@dataclass(frozen=True)
class MeasureType(TypeExpr):
    unit_class: str

    def __post_init__(self):
        if self.unit_class not in UNIT_CLASSES:
            raise UnknownUnit(f"unknown unit class {self.unit_class!r}")

    def __str__(self):
        return f"Measure({self.unit_class})"


@dataclass(frozen=True)
class EntityType(TypeExpr):
    """Entity type.  Resolved names are qualified ``namespace:Name``; names
    written inside a class body (``Entity(Song)``) stay local until the
    registry qualifies them."""

    name: str

    def __post_init__(self):
        if not self.name or self.name.count(":") > 1:
            raise TypeMismatch(f"bad entity type name {self.name!r}")

    @property
    def qualified(self):
        return ":" in self.name

    def __str__(self):
        return f"Entity({self.name})"


@dataclass(frozen=True)
class EnumType(TypeExpr):
    variants: tuple

    def __post_init__(self):
        vs = tuple(self.variants)
        object.__setattr__(self, "variants", vs)
        if not vs:
            raise TypeMismatch("Enum needs at least one variant")
        if len(set(vs)) != len(vs):
            raise TypeMismatch(f"duplicate Enum variants in {vs}")
        for v in vs:
            if not _IDENT.match(v):
                raise TypeMismatch(f"Enum variant {v!r} is not a lowercase identifier")

    def __str__(self):
        return f"Enum({', '.join(self.variants)})"


@dataclass(frozen=True)
class ArrayType(TypeExpr):
    # None only for the inferred type of an empty array literal
    elem: Optional[TypeExpr]

    def __post_init__(self):
        if isinstance(self.elem, ArrayType):
            raise TypeMismatch("nested arrays are not supported")

    def __str__(self):
        return f"Array({self.elem if self.elem is not None else '?'})"


ORDERED_TYPES = (NUMBER, CURRENCY, DATE, TIME)


def is_ordered(t: TypeExpr) -> bool:
    return t in ORDERED_TYPES or isinstance(t, MeasureType)


def is_sortable(t: TypeExpr) -> bool:
    return is_ordered(t) or t == STRING


def is_numeric(t: TypeExpr) -> bool:
    """Types that sum/avg accept."""
    return t in (NUMBER, CURRENCY) or isinstance(t, MeasureType)


def types_compatible(expected: TypeExpr, got: TypeExpr) -> bool:
    if expected == got:
        return True
    if isinstance(expected, ArrayType) and isinstance(got, ArrayType):
        return got.elem is None or expected.elem == got.elem
    return False


# ---------------------------------------------------------------------------
# Units
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Unit:
    symbol: str
    unit_class: str
    scale: float
    offset: float = 0.0


class UnitTable:
    """Unit symbol -> (class, scale to base, offset).  base = m * scale + offset."""

    def __init__(self, units: Iterable[Unit]):
        self._units = {}
        self._base = {}
        for u in units:
            if u.unit_class not in UNIT_CLASSES:
                raise UnknownUnit(f"unknown unit class {u.unit_class!r}")
            if u.scale <= 0:
                raise ValueError(f"unit {u.symbol}: scale must be positive")
            if u.symbol.lower() in {s.lower() for s in self._units}:
                raise ValueError(f"duplicate unit symbol {u.symbol!r}")
            self._units[u.symbol] = u
            if u.scale == 1 and u.offset == 0:
                if u.unit_class in self._base:
                    raise ValueError(f"two base units for {u.unit_class}")
                self._base[u.unit_class] = u
        for cls in {u.unit_class for u in self._units.values()}:
            if cls not in self._base:
                raise ValueError(f"unit class {cls} has no base unit")

    @classmethod
    def from_text(cls, text: str) -> "UnitTable":
        units = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            klass, sym, scale, offset = line.split()
            units.append(Unit(sym, klass, float(scale), float(offset)))
        return cls(units)

    @classmethod
    def load(cls, path) -> "UnitTable":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    def __contains__(self, symbol):
        return symbol in self._units

    def __iter__(self):
        return iter(self._units.values())

    def symbols(self):
        return list(self._units)

    def get(self, symbol: str) -> Unit:
        try:
            return self._units[symbol]
        except KeyError:
            raise UnknownUnit(f"unknown unit {symbol!r}") from None

    def lookup_ci(self, symbol: str) -> Optional[Unit]:
        """Case-insensitive lookup, used when reading utterances."""
        for s, u in self._units.items():
            if s.lower() == symbol.lower():
                return u
        return None

    def base_unit(self, unit_class: str) -> Unit:
        return self._base[unit_class]

    def to_base(self, magnitude: float, symbol: str) -> float:
        u = self.get(symbol)
        return magnitude * u.scale + u.offset

    def from_base(self, base: float, symbol: str) -> float:
        u = self.get(symbol)
        return (base - u.offset) / u.scale


def _load_default_units():
    text = resources.files("dlgc.data").joinpath("units.txt").read_text(encoding="utf-8")
    return UnitTable.from_text(text)


UNITS = _load_default_units()


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------

class Value:
    """Base class of runtime values."""

    @property
    def type(self) -> TypeExpr:
        raise NotImplementedError


@dataclass(frozen=True)
class Boolean(Value):
    value: bool

    @property
    def type(self):
        return BOOLEAN


@dataclass(frozen=True)
class Number(Value):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        if not math.isfinite(self.value):
            raise TypeMismatch("numbers must be finite")

    @property
    def type(self):
        return NUMBER


@dataclass(frozen=True)
class String(Value):
    value: str

    @property
    def type(self):
        return STRING


@dataclass(frozen=True)
class Measure(Value):
    value: float
    unit: str

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        UNITS.get(self.unit)

    @property
    def unit_class(self):
        return UNITS.get(self.unit).unit_class

    @property
    def base(self) -> float:
        return UNITS.to_base(self.value, self.unit)

    @property
    def type(self):
        return MeasureType(self.unit_class)


@dataclass(frozen=True)
class Currency(Value):
    value: float
    code: str

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "code", self.code.lower())
        if not re.fullmatch(r"[a-z]{3}", self.code):
            raise TypeMismatch(f"bad ISO-4217 code {self.code!r}")

    @property
    def type(self):
        return CURRENCY


@dataclass(frozen=True)
class Date(Value):
    value: _dt.date
    time: Optional[_dt.time] = None

    @property
    def type(self):
        return DATE

    def as_datetime(self):
        return _dt.datetime.combine(self.value, self.time or _dt.time(0, 0))

    def iso(self):
        d = self.value.isoformat()
        if self.time is None:
            return d
        return f"{d}T{self.time.hour:02d}:{self.time.minute:02d}"

    @classmethod
    def parse(cls, text: str) -> "Date":
        if "T" in text:
            d, t = text.split("T", 1)
            hh, mm = t.split(":")[:2]
            return cls(_dt.date.fromisoformat(d), _dt.time(int(hh), int(mm)))
        return cls(_dt.date.fromisoformat(text))


@dataclass(frozen=True)
class Time(Value):
    hour: int
    minute: int

    def __post_init__(self):
        if not (0 <= self.hour < 24 and 0 <= self.minute < 60):
            raise TypeMismatch(f"bad time {self.hour}:{self.minute}")

    @property
    def type(self):
        return TIME


@dataclass(frozen=True)
class Location(Value):
    lat: float
    lon: float
    display: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lat", float(self.lat))
        object.__setattr__(self, "lon", float(self.lon))
        if not (-90 <= self.lat <= 90 and -180 <= self.lon <= 180):
            raise TypeMismatch(f"coordinates out of range: {self.lat}, {self.lon}")

    @property
    def type(self):
        return LOCATION


@dataclass(frozen=True)
class Entity(Value):
    entity_type: str
    id: str
    display: str = ""

    def __post_init__(self):
        if not self.id:
            raise TypeMismatch("entity id must be non-empty")

    @property
    def type(self):
        return EntityType(self.entity_type)


@dataclass(frozen=True)
class Enum(Value):
    value: str

    @property
    def type(self):
        # the variant list is only known from the declaration
        return EnumType((self.value,))


@dataclass(frozen=True)
class Array(Value):
    values: tuple = field(default=())

    def __post_init__(self):
        vs = tuple(self.values)
        object.__setattr__(self, "values", vs)
        if any(isinstance(v, Array) for v in vs):
            raise TypeMismatch("nested arrays are not supported")
        if len({_type_key(v.type) for v in vs}) > 1:
            raise TypeMismatch("array elements must share one type")

    @property
    def type(self):
        return ArrayType(self.values[0].type if self.values else None)


def _type_key(t):
    # Enum literal types carry only their own variant; treat them as one type
    return "Enum" if isinstance(t, EnumType) else t


def value_matches(v: Value, t: TypeExpr) -> bool:
    """Does value ``v`` inhabit type ``t``?"""
    if isinstance(t, EnumType):
        return isinstance(v, Enum) and v.value in t.variants
    if isinstance(t, ArrayType):
        return isinstance(v, Array) and all(value_matches(x, t.elem) for x in v.values)
    return types_compatible(t, v.type)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def convert_measure(v: Measure, target_unit: str) -> Measure:
    target = UNITS.get(target_unit)
    if target.unit_class != v.unit_class:
        raise UnitClassMismatch(f"cannot convert {v.unit_class} to {target.unit_class}")
    return Measure((v.base - target.offset) / target.scale, target_unit)


def to_base_unit(v: Measure) -> Measure:
    return Measure(v.base, UNITS.base_unit(v.unit_class).symbol)


def normalize_text(s: str) -> str:
    return " ".join(unicodedata.normalize("NFC", s).casefold().split())


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=REL_TOL, abs_tol=1e-12)


def _cmp(a, b):
    return -1 if a < b else (1 if a > b else 0)


def _ordered_cmp(a: Value, b: Value) -> int:
    if isinstance(a, Number):
        return 0 if _close(a.value, b.value) else _cmp(a.value, b.value)
    if isinstance(a, Measure):
        return 0 if _close(a.base, b.base) else _cmp(a.base, b.base)
    if isinstance(a, Currency):
        if a.code != b.code:
            raise TypeMismatch(f"currency {a.code} vs {b.code}")
        return 0 if _close(a.value, b.value) else _cmp(a.value, b.value)
    if isinstance(a, Date):
        return _cmp(a.as_datetime(), b.as_datetime())
    if isinstance(a, Time):
        return _cmp((a.hour, a.minute), (b.hour, b.minute))
    raise UnsupportedOperator(f"no ordering on {a.type}")


def values_equal(a: Value, b: Value) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, (Number, Measure, Currency, Date, Time)):
        if isinstance(a, Measure) and a.unit_class != b.unit_class:
            return False
        if isinstance(a, Currency) and a.code != b.code:
            return False
        return _ordered_cmp(a, b) == 0
    if isinstance(a, String):
        return normalize_text(a.value) == normalize_text(b.value)
    if isinstance(a, Entity):
        return (a.entity_type, a.id) == (b.entity_type, b.id)
    if isinstance(a, Location):
        return _close(a.lat, b.lat) and _close(a.lon, b.lon)
    if isinstance(a, Array):
        return len(a.values) == len(b.values) and all(
            values_equal(x, y) for x, y in zip(a.values, b.values))
    return a == b


def _check_same_type(a: Value, b: Value):
    if type(a) is not type(b):
        raise TypeMismatch(f"cannot compare {a.type} with {b.type}")
    if isinstance(a, Measure) and a.unit_class != b.unit_class:
        raise TypeMismatch(f"cannot compare {a.type} with {b.type}")
    if isinstance(a, Entity) and a.entity_type != b.entity_type:
        raise TypeMismatch(f"cannot compare {a.type} with {b.type}")


def compare_values(a: Value, b: Value, op: str) -> bool:
    """Evaluate ``a op b`` for op in ``==``, ``>=``, ``<=``."""
    _check_same_type(a, b)
    if op == "==":
        return values_equal(a, b)
    if op not in (">=", "<="):
        raise UnsupportedOperator(f"unknown operator {op!r}")
    if not is_ordered(a.type):
        raise UnsupportedOperator(f"{op} is not defined on {a.type}")
    c = _ordered_cmp(a, b)
    return c >= 0 if op == ">=" else c <= 0


def sort_key_cmp(a: Value, b: Value) -> int:
    """Three-way comparison used by sort; strings compare case-insensitively."""
    if isinstance(a, String):
        return _cmp(normalize_text(a.value), normalize_text(b.value))
    return _ordered_cmp(a, b)


def geo_distance(a: Location, b: Location) -> Measure:
    """Great-circle (haversine) distance in meters."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dphi = p2 - p1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    h = min(1.0, max(0.0, h))
    return Measure(2 * EARTH_RADIUS_M * math.asin(math.sqrt(h)), "m")


# ---------------------------------------------------------------------------
# Entity lexicon
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LexEntry:
    id: str
    display: str
    aliases: tuple = ()

    def names(self):
        return (self.id, self.display) + self.aliases


class EntityLexicon:
    """Entity type -> list of known entities with display names and aliases."""

    def __init__(self, entries: Optional[dict] = None):
        self._entries = {}
        for etype, rows in (entries or {}).items():
            for e in rows:
                self._add(etype, e)

    def _add(self, etype, entry):
        rows = self._entries.setdefault(etype, [])
        if any(r.id == entry.id for r in rows):
            raise ValueError(f"duplicate id {entry.id!r} for {etype}")
        rows.append(entry)

    @classmethod
    def from_text(cls, text: str) -> "EntityLexicon":
        lex = cls()
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = shlex.split(line)
            etype, eid, display = parts[:3]
            aliases = tuple(parts[3].split("|")) if len(parts) > 3 else ()
            lex._add(etype, LexEntry(eid, display, aliases))
        return lex

    @classmethod
    def load(cls, path) -> "EntityLexicon":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    def types(self):
        return list(self._entries)

    def entries(self, etype):
        return list(self._entries.get(etype, ()))

    def extended(self, etype, entries) -> "EntityLexicon":
        """Copy of this lexicon with extra entries; ids already present are skipped."""
        new = EntityLexicon()
        new._entries = {k: list(v) for k, v in self._entries.items()}
        for e in entries:
            if not any(r.id == e.id for r in new._entries.get(etype, ())):
                new._add(etype, e)
        return new

    def find(self, etype, text):
        key = normalize_text(text)
        return [e for e in self._entries.get(etype, ())
                if any(normalize_text(n) == key for n in e.names())]

    def lookup(self, etype, text) -> Entity:
        if etype not in self._entries:
            raise UnknownEntity(f"no entities known for {etype}")
        hits = self.find(etype, text)
        if not hits:
            raise UnknownEntity(f"{text!r} is not a known {etype}")
        if len(hits) > 1:
            raise AmbiguousEntity(f"{text!r} matches {', '.join(h.id for h in hits)}")
        return Entity(etype, hits[0].id, hits[0].display)


def _load_default_lexicon():
    text = resources.files("dlgc.data").joinpath("lexicon.txt").read_text(encoding="utf-8")
    return EntityLexicon.from_text(text)


BUILTIN_LEXICON = _load_default_lexicon()
