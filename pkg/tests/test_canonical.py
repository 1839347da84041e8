import pytest
from hypothesis import given, settings

from gen import Rand, gen_items, gen_lab_program, gen_program, gen_shops, lab_registry, permute, strategy
from reference import plain, rows_match
from dlgc import ast as A
from dlgc import syntax as S
from dlgc import types as T
from dlgc.canonical import (
    FilterTooLarge, canonical_action, canonicalize, canonicalize_program, is_canonical,
    normalize_filter,
)
from dlgc.errors import EmptyAggregate
from dlgc.execute import execute_program
from dlgc.typecheck import typecheck_program


def norm(text):
    return S.print_filter(normalize_filter(S.parse_filter(text)))


@pytest.mark.parametrize("text, want", [
    ("b == 2 && a == 1", "a == 1 && b == 2"),
    ("!(!(x >= 3))", "x >= 3"),
    ("x == 1 || !(x == 1)", "true"),
    # "!" sorts before letters bytewise
    ("x == 1 && !(x == 1) || false", "!(x == 1) && x == 1"),
    ("true && y == 2", "y == 2"),
    ("a == 1 && a == 1", "a == 1"),
    ("!(a == 1 || b == 2)", "!(a == 1) && !(b == 2)"),
    ("false", "false"),
])
def test_normalize_examples(text, want):
    assert norm(text) == want


def test_absorption_pair_prints_identically():
    assert norm("(a == 1 || b == 2) && a == 1") == norm("a == 1 && (b == 2 || a == 1)")


def test_in_array_values_sorted_and_deduplicated():
    assert norm('in_array(x, ["b", "a", "b"])') == 'in_array(x, ["a", "b"])'


def test_filter_too_large():
    # (a1 && b1) || ... || (a13 && b13) distributes to 2**13 clauses
    parts = [f"(a{i} == 1 && b{i} == 1)" for i in range(13)]
    with pytest.raises(FilterTooLarge):
        normalize_filter(S.parse_filter(" || ".join(parts)))


def test_action_args_sorted():
    a = A.Action(A.FunctionRef("Spotify", "Play"), (("song", A.VarRef("id")), ("device", T.String("d"))))
    b = A.Action(A.FunctionRef("Spotify", "Play"), (("device", T.String("d")), ("song", A.VarRef("id"))))
    assert canonical_action(a) == canonical_action(b)
    assert canonical_action(a).arg_names() == ["device", "song"]


def test_post_prints_unchanged(registry):
    typed = typecheck_program(S.parse_program('@Transaction.Execute; @com.twitter.Post(status="hello");'),
                              registry)
    assert canonicalize(typed).text == '@Transaction.Execute; @com.twitter.Post(status="hello");'


def test_measures_in_base_units():
    a = S.parse_program("@Transaction.Execute; @A.B(), d >= 5km;")
    b = S.parse_program("@Transaction.Execute; @A.B(), d >= 5000m;")
    assert canonicalize(a).text == canonicalize(b).text
    assert canonicalize(a).text.endswith("d >= 5000m;")


def test_strings_nfc():
    a = S.parse_program('@Transaction.Execute; @A.B(), t == "e\u0301";')
    assert '"\u00e9"' in canonicalize(a).text


def test_pipeline_order_in_print():
    p = S.parse_program("@Transaction.Execute; [b, a] of aggregate(max r of "
                        "sort(r desc of @A.B(), z == 1 && y == 2)[1:5]);")
    assert canonicalize(p).text == ("@Transaction.Execute; [a, b] of aggregate(max r of "
                                    "sort(r desc of @A.B(), y == 2 && z == 1)[1:5]);")


def test_statement_order_kept():
    p = S.parse_program("@Transaction.Execute; @B.B(); @A.A();")
    assert [s.query.base.cls for s in canonicalize_program(p).statements] == ["B", "A"]


@settings(max_examples=200)
@given(strategy(gen_program))
def test_idempotent(p):
    once = canonicalize(p)
    assert canonicalize(once.program).text == once.text
    assert is_canonical(once.program)


def test_permutation_invariant():
    for seed in range(300):
        r = Rand(seed)
        p = gen_lab_program(r)
        assert canonicalize(permute(p, r)).text == canonicalize(p).text


def _results(typed, reg):
    try:
        return [(res.rows, [o.success for o in res.outcomes]) for res in execute_program(typed, reg)]
    except EmptyAggregate:
        return "empty"


def test_execution_preserved():
    for seed in range(1000):
        r = Rand(10_000 + seed)
        items, shops = gen_items(r), gen_shops(r)
        p = gen_lab_program(r)
        reg = lab_registry(items, shops)
        got = _results(typecheck_program(p, reg), reg)
        reg = lab_registry(items, shops)
        want = _results(typecheck_program(canonicalize_program(p), reg), reg)
        assert (got == "empty") == (want == "empty"), seed
        if got == "empty":
            continue
        for (g_rows, g_ok), (w_rows, w_ok) in zip(got, want):
            assert g_ok == w_ok
            if g_rows is not None:
                plain_rows = [{k: plain(v) for k, v in row.items()} for row in w_rows]
                assert rows_match(g_rows, plain_rows, ordered=False), seed
