import datetime as dt
import math

import pytest
from hypothesis import given, strategies as st

from dlgc import types as T
from dlgc.errors import (
    AmbiguousEntity, TypeMismatch, UnitClassMismatch, UnknownEntity, UnknownUnit,
    UnsupportedOperator,
)


def test_convert_km_to_m():
    v = T.convert_measure(T.Measure(5, "km"), "m")
    assert v.unit == "m" and v.value == pytest.approx(5000)


def test_convert_celsius_to_kelvin():
    assert T.convert_measure(T.Measure(0, "C"), "K").value == pytest.approx(273.15)


def test_convert_minutes_to_hours():
    # 90 min is 5400 s; 5400 / 3600 = 1.5
    assert T.convert_measure(T.Measure(90, "min"), "h").value == pytest.approx(1.5)


def test_convert_fahrenheit_boiling_point():
    assert T.convert_measure(T.Measure(212, "F"), "C").value == pytest.approx(100)


def test_convert_across_classes_fails():
    with pytest.raises(UnitClassMismatch):
        T.convert_measure(T.Measure(1, "km"), "kg")


def test_unknown_unit():
    with pytest.raises(UnknownUnit):
        T.convert_measure(T.Measure(1, "km"), "parsec")
    with pytest.raises(UnknownUnit):
        T.Measure(1, "furlong")


@given(st.sampled_from(sorted(T.UNITS.symbols())),
       st.floats(-1e6, 1e6, allow_nan=False),
       st.data())
def test_convert_round_trip(unit, mag, data):
    cls = T.UNITS.get(unit).unit_class
    other = data.draw(st.sampled_from([u.symbol for u in T.UNITS if u.unit_class == cls]))
    there = T.convert_measure(T.Measure(mag, unit), other)
    back = T.convert_measure(there, unit)
    assert math.isclose(back.value, mag, rel_tol=1e-9, abs_tol=1e-6)


def test_unit_table_requires_a_base_unit():
    with pytest.raises(ValueError):
        T.UnitTable.from_text("length km 1000 0\n")


def test_unit_table_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        T.UnitTable.from_text("length m 1 0\nlength x 0 0\n")


def test_every_unit_class_has_one_base():
    for cls in T.UNIT_CLASSES:
        base = T.UNITS.base_unit(cls)
        assert (base.scale, base.offset) == (1, 0)


def test_compare_equal_measures_in_different_units():
    assert T.compare_values(T.Measure(5, "km"), T.Measure(5000, "m"), "==")


def test_entities_equal_by_type_and_id():
    a = T.Entity("tt:country", "it", "Italy")
    b = T.Entity("tt:country", "it", "ITALIA")
    assert T.compare_values(a, b, "==")
    assert not T.values_equal(a, T.Entity("tt:iso_lang_code", "it", "Italian"))


def test_dates_ordered():
    a, b = T.Date(dt.date(2020, 1, 2)), T.Date(dt.date(2020, 1, 1))
    assert T.compare_values(a, b, ">=")
    assert not T.compare_values(a, b, "<=")


def test_missing_time_of_day_is_midnight():
    assert T.values_equal(T.Date(dt.date(2020, 1, 1)), T.Date(dt.date(2020, 1, 1), dt.time(0, 0)))


def test_strings_compare_case_and_space_insensitively():
    assert T.compare_values(T.String("Hello   World"), T.String(" hello world"), "==")


def test_ordering_undefined_on_strings():
    with pytest.raises(UnsupportedOperator):
        T.compare_values(T.String("a"), T.String("b"), ">=")


def test_compare_different_types():
    with pytest.raises(TypeMismatch):
        T.compare_values(T.Number(1), T.String("1"), "==")
    with pytest.raises(TypeMismatch):
        T.compare_values(T.Measure(1, "m"), T.Measure(1, "kg"), ">=")


def _ordered_values():
    num = st.floats(-1e6, 1e6, allow_nan=False).map(T.Number)
    length = st.tuples(st.floats(0, 1e4, allow_nan=False), st.sampled_from(["m", "km", "ft", "mi"]))
    date = st.dates(dt.date(1990, 1, 1), dt.date(2030, 1, 1)).map(T.Date)
    time = st.tuples(st.integers(0, 23), st.integers(0, 59)).map(lambda x: T.Time(*x))
    return st.one_of(
        st.tuples(num, num),
        st.tuples(length.map(lambda x: T.Measure(*x)), length.map(lambda x: T.Measure(*x))),
        st.tuples(date, date),
        st.tuples(time, time),
    )


@given(_ordered_values())
def test_compare_is_a_total_order(pair):
    a, b = pair
    eq = T.compare_values(a, b, "==")
    ge = T.compare_values(a, b, ">=")
    le = T.compare_values(a, b, "<=")
    lt, gt = le and not ge, ge and not le
    assert ge or le
    assert [eq, lt, gt].count(True) == 1


def test_location_bounds():
    with pytest.raises(TypeMismatch):
        T.Location(91, 0)
    with pytest.raises(TypeMismatch):
        T.Location(0, -181)


def test_entity_id_nonempty():
    with pytest.raises(TypeMismatch):
        T.Entity("tt:country", "", "")


def test_array_elements_share_a_type():
    with pytest.raises(TypeMismatch):
        T.Array((T.Number(1), T.String("x")))
    with pytest.raises(TypeMismatch):
        T.Array((T.Array(()),))


def test_enum_type_rejects_bad_variants():
    with pytest.raises(TypeMismatch):
        T.EnumType(())
    with pytest.raises(TypeMismatch):
        T.EnumType(("a", "a"))
    with pytest.raises(TypeMismatch):
        T.EnumType(("Upper",))


def test_array_type_not_nested():
    with pytest.raises(TypeMismatch):
        T.ArrayType(T.ArrayType(T.NUMBER))


def test_geo_distance_zero():
    p = T.Location(37.4, -122.1)
    assert T.geo_distance(p, p).value == 0


def test_geo_distance_half_circumference():
    d = T.geo_distance(T.Location(0, 0), T.Location(0, 180)).value
    assert abs(d - math.pi * 6371008.8) < 1e3


def _haversine(lat1, lon1, lat2, lon2):
    # textbook form via atan2, independent of the package's asin form
    r = 6371008.8
    p1, p2 = math.radians(lat1), math.radians(lat2)
    a = (math.sin(math.radians(lat2 - lat1) / 2) ** 2
         + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lon2 - lon1) / 2) ** 2)
    return 2 * r * math.atan2(math.sqrt(a), math.sqrt(1 - a))


def test_geo_distance_sf_la():
    d = T.geo_distance(T.Location(37.7749, -122.4194), T.Location(34.0522, -118.2437)).value
    assert d == pytest.approx(_haversine(37.7749, -122.4194, 34.0522, -118.2437), rel=1e-3)
    assert 5.5e5 < d < 5.6e5


coords = st.tuples(st.floats(-90, 90, allow_nan=False), st.floats(-180, 180, allow_nan=False))


@given(coords, coords, coords)
def test_geo_distance_metric(a, b, c):
    pa, pb, pc = (T.Location(*x) for x in (a, b, c))
    ab = T.geo_distance(pa, pb).value
    assert ab == pytest.approx(T.geo_distance(pb, pa).value, rel=1e-6, abs=1e-6)
    bc, ac = T.geo_distance(pb, pc).value, T.geo_distance(pa, pc).value
    assert ac <= (ab + bc) * (1 + 1e-6) + 1e-6


def test_builtin_lexicon_seed_sizes():
    for etype in ("tt:iso_lang_code", "tt:country", "tt:stock_ticker"):
        assert len(T.BUILTIN_LEXICON.entries(etype)) >= 20


def test_lexicon_lookup_and_alias():
    assert T.BUILTIN_LEXICON.lookup("tt:country", "Italy") == T.Entity("tt:country", "it", "Italy")
    with pytest.raises(UnknownEntity):
        T.BUILTIN_LEXICON.lookup("tt:country", "Atlantis")


def test_lexicon_ambiguous_alias():
    lex = T.EntityLexicon.from_text('x:t a "Alpha" same\nx:t b "Beta" same\n')
    with pytest.raises(AmbiguousEntity):
        lex.lookup("x:t", "same")
    assert lex.lookup("x:t", "beta").id == "b"


def test_lexicon_ids_unique():
    with pytest.raises(ValueError):
        T.EntityLexicon.from_text('x:t a "A"\nx:t a "B"\n')


def test_currency_code_checked():
    assert T.Currency(3, "USD").code == "usd"
    with pytest.raises(TypeMismatch):
        T.Currency(3, "dollars")
