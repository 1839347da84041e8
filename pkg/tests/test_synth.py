import pytest

from dlgc import ast as A
from dlgc import syntax as S
from dlgc.dialogue import DialogueState
from dlgc.errors import DuplicateTemplateId, TemplateError, Unparseable, UnknownHoleCategory
from dlgc.skills import load_skills
from dlgc.synth import (
    CONSTRUCTS, SynthPair, build_parser_index, constructs_of, coverage, expand, lint_pair,
    load_templates, normalize_utterance, parse_templates, read_tsv, synthesize_dialogues,
    template_constructs, type_matches, write_tsv,
)
from dlgc import types as T
from dlgc.typecheck import typecheck_program

STANZA = """id: {id}
category: filter-phrase
guard: Number
pattern: {pattern}
constructor: {constructor}
"""

POST = '@Transaction.Execute; @com.twitter.Post(status="hello");'


def stanza(id="t1", pattern="above ${v:value}", constructor="x >= ${v}"):
    return STANZA.format(id=id, pattern=pattern, constructor=constructor)


def test_bundled_templates(templates):
    assert len(templates) >= 60
    assert template_constructs(templates) >= set(CONSTRUCTS)


def test_temperature_template_says_hotter(templates):
    (t,) = [t for t in templates if t.guard == "Measure(temperature)" and ">=" in t.constructor]
    assert "hotter than ${v:value}" in t.pattern


def test_template_parsing():
    (t,) = parse_templates(stanza())
    assert t.holes[0].name == "v" and t.holes[0].category == "value"


@pytest.mark.parametrize("text, err", [
    (stanza(constructor="x >= ${w}"), TemplateError),
    (stanza(pattern="above ${v:colour}"), UnknownHoleCategory),
    (stanza(pattern="above ${v:value} ${v:value}"), TemplateError),
    ("id: x\ncategory: filter-phrase\n", TemplateError),
    ("nonsense line\n", TemplateError),
])
def test_template_errors(text, err):
    with pytest.raises(err):
        parse_templates(text)


def test_duplicate_template_ids(tmp_path):
    (tmp_path / "a.tmpl").write_text(stanza() + "\n" + stanza())
    with pytest.raises(DuplicateTemplateId):
        load_templates(tmp_path)


def test_type_guards():
    assert type_matches(T.MeasureType("length"), "Measure(*)")
    assert type_matches(T.ArrayType(T.EntityType("a:b")), "Array(Entity(*))")
    assert type_matches(T.NUMBER, "String | Number")
    assert not type_matches(T.NUMBER, "Entity(*)")


def test_limit_zero(registry, templates):
    assert expand(registry, templates, depth=2, limit=0) == []


def test_depth_one_plays_each_song(templates):
    reg = load_skills(only=["Spotify"])
    pairs = expand(reg, templates, depth=1, limit=10 ** 6)
    played = {p.program for p in pairs if p.program.startswith("@Transaction.Execute; @Spotify.Play(")}
    songs = [r["id"] for r in reg.backends["Spotify"][0].rows("Song")]
    for song in songs:
        want = f"@Transaction.Execute; @Spotify.Play(song={S.print_value(song)});"
        assert want in played
    assert all(p.depth <= 1 for p in pairs)


def test_depth_two_has_closest_cuisine_query(pairs):
    hits = [p for p in pairs if p.program.startswith("@Transaction.Execute; sort(distance(geo, $here) asc of "
                                                     "@Yelp.Restaurant(), contains(cuisines, ")]
    assert hits


def test_limit_keeps_diversity(registry, templates, pairs):
    small = expand(registry, templates, depth=2, limit=200)
    assert len(small) == 200
    # round robin: far more distinct template combinations than a prefix would give
    combos = {tuple(sorted(set(p.meta["templates"]))) for p in small}
    assert len(combos) > 100


def test_pairs_are_canonical_clean_and_unique(registry, pairs):
    assert len({(p.utterance, p.program) for p in pairs}) == len(pairs)
    for p in pairs[::25]:
        assert lint_pair(p, registry) == []


def test_coverage(pairs):
    cov = coverage(pairs)
    assert all(cov[c] > 0 for c in CONSTRUCTS)


def test_expand_is_deterministic(registry, templates, pairs, tmp_path):
    again = expand(registry, templates, depth=2, limit=10 ** 6, seed=0)
    assert [(p.utterance, p.program) for p in again] == [(p.utterance, p.program) for p in pairs]
    write_tsv(pairs[:500], tmp_path / "a.tsv")
    write_tsv(again[:500], tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_tsv_round_trip(pairs, tmp_path):
    write_tsv(pairs[:50], tmp_path / "x.tsv")
    back = read_tsv(tmp_path / "x.tsv")
    assert [(p.context, p.utterance, p.program) for p in back] == \
        [(p.context, p.utterance, p.program) for p in pairs[:50]]
    (tmp_path / "bad.tsv").write_text("only\ttwo\n")
    with pytest.raises(ValueError):
        read_tsv(tmp_path / "bad.tsv")


# -- lint -------------------------------------------------------------------

def test_lint_clean_post(registry):
    assert lint_pair(SynthPair("act: none", "post a tweet saying hello", POST), registry) == []


def test_lint_missing_constant(registry):
    (v,) = lint_pair(SynthPair("act: none", "post a tweet", POST), registry)
    assert v.kind == "ConstantNotInUtteranceOrContext" and v.value == "hello"
    assert POST[v.span[0]:v.span[1]] == '"hello"'


def test_lint_constant_in_context(registry):
    ctx = 'outstanding: @com.twitter.Post(status="hello"); act: @Transaction.Execute'
    assert lint_pair(SynthPair(ctx, "yes", POST), registry) == []


def test_lint_non_canonical(registry):
    prog = "@Transaction.Execute; @Yelp.Book(restaurant=\"golden-dragon\"^^Yelp:Restaurant(\"Golden Dragon\"), people=2);"
    kinds = [v.kind for v in lint_pair(SynthPair("act: none", "book golden dragon for 2", prog), registry)]
    assert kinds == ["NonCanonicalProgram"]


def test_lint_type_error(registry):
    (v,) = lint_pair(SynthPair("act: none", "x", "@Transaction.Execute; @Nope.Nope();"), registry)
    assert v.kind == "TypeError"


# -- dialogues --------------------------------------------------------------

def test_no_dialogues(registry, templates):
    assert synthesize_dialogues(registry, templates, 0) == []


def _entity_action_before_query(transcript, cls):
    seen_query = False
    for t in transcript.turns:
        prog = S.parse_program(t.program)
        for s in prog.statements:
            if isinstance(s, A.StreamStatement) or s.domain != cls:
                continue
            if s.query is not None and s.action is None:
                seen_query = True
            elif s.query is None and any(isinstance(v, T.Entity) for _, v in s.action.args):
                if not seen_query:
                    return True
    return False


def test_restaurant_dialogues_query_before_booking(templates):
    reg = load_skills(only=["Yelp"])
    (d,) = synthesize_dialogues(reg, templates, 1, seed=7)
    assert d.turns and not _entity_action_before_query(d, "Yelp")
    many = synthesize_dialogues(reg, templates, 40, seed=3)
    assert not any(_entity_action_before_query(x, "Yelp") for x in many)
    assert any("Book" in t.program for x in many for t in x.turns)


def test_dialogue_programs_check_and_lint(registry, templates, pairs):
    for d in synthesize_dialogues(registry, templates, 30, seed=1, pool=pairs):
        assert d.turns and d.turns[-1].user_act in ("thank", "confirm", "reject", "fill", "new", "refine")
        for t in d.turns:
            typecheck_program(S.parse_program(t.program), registry)
            assert lint_pair(SynthPair(t.context, t.utterance, t.program), registry) == []


def test_dialogues_are_deterministic(registry, templates, pairs):
    a = synthesize_dialogues(registry, templates, 5, seed=11, pool=pairs)
    b = synthesize_dialogues(registry, templates, 5, seed=11, pool=pairs)
    assert [x.to_text() for x in a] == [x.to_text() for x in b]


# -- parser index -----------------------------------------------------------

def test_index_resolves_adele(index, registry):
    p = index.resolve(DialogueState(), "Play songs by Adele!", registry)
    assert S.print(p.program) == ('@Transaction.Execute; @Spotify.Song(), contains(artists, '
                                  '"adele"^^MediaPlayer:Artist("Adele")) => @Spotify.Play(song=id);')


def test_index_rejects_gibberish(index, registry):
    with pytest.raises(Unparseable):
        index.resolve(DialogueState(), "colourless green ideas", registry)


def test_empty_index(registry):
    idx = build_parser_index([])
    assert len(idx) == 0
    with pytest.raises(Unparseable):
        idx.resolve(DialogueState(), "post a tweet saying hello", registry)


def test_collision_tie_break(registry):
    a = SynthPair("act: none", "show me the thing", "@Transaction.Execute; @com.twitter.Timeline();",
                  {"depth": 2})
    b = SynthPair("act: none", "show me the thing", "@Transaction.Execute; @Spotify.Song();",
                  {"depth": 2})
    c = SynthPair("act: none", "show me the thing", "@Transaction.Execute; @Yelp.Restaurant();",
                  {"depth": 3})
    for order in ([a, b, c], [c, b, a], [b, c, a]):
        p = build_parser_index(order, registry).resolve(DialogueState(), "show me the thing", registry)
        # lowest depth first, then the bytewise smaller program
        assert S.print(p.program) == "@Transaction.Execute; @Spotify.Song();"


def test_normalization():
    assert normalize_utterance("  Play  HUMBLE., please! ") == "play humble please"
    assert normalize_utterance("Café 2.5 km on 2024-05-01") == "café 2.5 km on 2024-05-01"


def test_constructs_of_chain():
    prog = S.parse_program('@Transaction.Execute; @Spotify.Song(), contains(artists, "x") '
                           '=> @Spotify.Play(song=id);')
    assert {"chain", "contains"} <= constructs_of(prog)
