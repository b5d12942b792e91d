from __future__ import annotations

import numpy as np
import pytest

from retloop.evaluation import (
    AmrConversionError,
    AmrGraph,
    AmrTriple,
    SexprParseError,
    Str,
    Sym,
    aggregate_examples,
    exact_match_at_k,
    parse_sexpr,
    parse_to_amr,
    print_sexpr,
    score_example,
    smatch,
    smatch_exhaustive,
    to_amr,
)

FULL_PARSE = (
    "(Yield\n"
    "  :output (Event.start\n"
    "    :obj (FindNumNextEvent\n"
    "      :constraint (Event.subject_?\n"
    '        :obj (?~= "staff meeting"))\n'
    "      :number 1L)))"
)

FULL_TRIPLES = [
    "instance($0, Yield)",
    "output($0, $1)",
    "instance($1, Event.start)",
    "obj($1, $2)",
    "instance($2, FindNumNextEvent)",
    "constraint($2, $3)",
    "instance($3, Event.subject_?)",
    "obj($3, $4)",
    "instance($4, ?~=)",
    'ARG0($4, "staff meeting")',
    "number($2, 1L)",
]


# --- parsing -------------------------------------------------------------------


def test_parse_minimal_form():
    tree = parse_sexpr("(f :a 1L)")
    assert tree == [Sym("f"), Sym(":a"), Sym("1L")]
    assert isinstance(tree[0], Sym)


def test_parse_full_listing_has_yield_head():
    tree = parse_sexpr(FULL_PARSE)
    assert tree[0] == Sym("Yield")
    inner = tree[2]
    assert inner[0] == Sym("Event.start")


def test_parse_string_literals_preserved():
    tree = parse_sexpr('(f "two words" "esc \\" quote")')
    assert tree[1] == Str("two words")
    assert tree[2] == Str('esc " quote')


def test_parse_unbalanced_reports_end_offset():
    text = "(a (b"
    with pytest.raises(SexprParseError) as excinfo:
        parse_sexpr(text)
    assert excinfo.value.offset == len(text)


def test_parse_unterminated_string_reports_offset():
    text = '(a "oops'
    with pytest.raises(SexprParseError) as excinfo:
        parse_sexpr(text)
    assert excinfo.value.offset == 3


def test_parse_trailing_content_rejected():
    with pytest.raises(SexprParseError):
        parse_sexpr("(a) (b)")


def test_parse_print_round_trip():
    rng = np.random.default_rng(0)

    def random_tree(depth):
        if depth == 0 or rng.random() < 0.3:
            return Str("lit eral") if rng.random() < 0.3 else Sym(f"atom{rng.integers(9)}")
        return [Sym(f"F{rng.integers(5)}")] + [
            random_tree(depth - 1) for _ in range(rng.integers(1, 4))
        ]

    for _ in range(50):
        tree = random_tree(3)
        assert parse_sexpr(print_sexpr(tree)) == tree


# --- conversion to triples -------------------------------------------------------


def test_full_parse_converts_to_listed_triples():
    graph = parse_to_amr(FULL_PARSE)
    assert graph.render_triples() == FULL_TRIPLES
    assert graph.entity_count == 5


def test_leaf_function():
    graph = parse_to_amr("(f)")
    assert graph.render_triples() == ["instance($0, f)"]


def test_positional_nesting_uses_arg0():
    graph = parse_to_amr("(g (h))")
    assert graph.render_triples() == ["instance($0, g)", "ARG0($0, $1)", "instance($1, h)"]


def test_multiple_positionals_index_up():
    graph = parse_to_amr("(g (h) (i) 3L)")
    assert graph.render_triples() == [
        "instance($0, g)",
        "ARG0($0, $1)",
        "instance($1, h)",
        "ARG1($0, $2)",
        "instance($2, i)",
        "ARG2($0, 3L)",
    ]


def test_keyword_without_value_is_error():
    with pytest.raises(AmrConversionError):
        to_amr(parse_sexpr("(f :a)"))


def test_keyword_in_value_position_is_error():
    with pytest.raises(AmrConversionError):
        to_amr(parse_sexpr("(f :a :b)"))


def test_entity_count_equals_function_applications():
    rng = np.random.default_rng(1)

    def random_parse(depth):
        n_args = int(rng.integers(0, 3))
        parts = []
        count = 1
        for j in range(n_args):
            if depth > 0 and rng.random() < 0.6:
                sub, sub_count = random_parse(depth - 1)
                parts.append(f":k{j} {sub}")
                count += sub_count
            else:
                parts.append(f":k{j} v{j}")
        body = " ".join([f"Fn{rng.integers(6)}"] + parts)
        return f"({body})", count

    for _ in range(30):
        text, count = random_parse(3)
        assert parse_to_amr(text).entity_count == count


# --- smatch -------------------------------------------------------------------


def test_smatch_identity():
    graph = parse_to_amr(FULL_PARSE)
    score = smatch(graph, graph)
    assert score.precision == score.recall == score.f1 == 1.0
    assert score.matched == score.candidate_total == score.reference_total == 11


def test_smatch_drop_one_triple_fixture():
    reference = parse_to_amr(FULL_PARSE)
    candidate = AmrGraph(
        [t for t in reference.triples if t.render() != "number($2, 1L)"],
        reference.entity_count,
    )
    score = smatch(candidate, reference)
    assert score.precision == pytest.approx(1.0, abs=1e-9)
    assert score.recall == pytest.approx(10.0 / 11.0, abs=1e-9)
    assert score.f1 == pytest.approx(20.0 / 21.0, abs=1e-9)


def _random_graph(rng, max_entities=5) -> AmrGraph:
    n = int(rng.integers(1, max_entities + 1))
    labels = [f"F{int(rng.integers(3))}" for _ in range(n)]
    triples = [AmrTriple("instance", i, labels[i]) for i in range(n)]
    for _ in range(int(rng.integers(0, 2 * n))):
        src, tgt = int(rng.integers(n)), int(rng.integers(n))
        rel = f"r{int(rng.integers(3))}"
        if rng.random() < 0.3:
            triples.append(AmrTriple(rel, src, f"c{int(rng.integers(3))}"))
        elif src != tgt:
            triples.append(AmrTriple(rel, src, tgt))
    return AmrGraph(triples, n)


def test_smatch_equals_exhaustive_on_small_graphs():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = _random_graph(rng), _random_graph(rng)
        got = smatch(a, b)
        expect = smatch_exhaustive(a, b)
        assert got.matched == expect.matched


def test_smatch_symmetry_swaps_p_and_r():
    rng = np.random.default_rng(3)
    for _ in range(40):
        a, b = _random_graph(rng), _random_graph(rng)
        ab, ba = smatch(a, b), smatch(b, a)
        assert ab.precision == pytest.approx(ba.recall, abs=1e-12)
        assert ab.recall == pytest.approx(ba.precision, abs=1e-12)
        assert ab.f1 == pytest.approx(ba.f1, abs=1e-12)


def test_unmatched_triple_lowers_precision_only():
    rng = np.random.default_rng(4)
    for _ in range(25):
        cand, ref = _random_graph(rng), _random_graph(rng)
        base = smatch_exhaustive(cand, ref)
        bigger = AmrGraph(
            cand.triples + [AmrTriple("relation-nowhere-in-reference", 0, "zz")],
            cand.entity_count,
        )
        grown = smatch_exhaustive(bigger, ref)
        assert grown.matched == base.matched
        assert grown.precision < base.precision or base.matched == 0


def test_hill_climb_bounds():
    from retloop.evaluation import _hill_climb, _reference_counter, _matched_count, _smart_init

    rng = np.random.default_rng(5)
    for _ in range(40):
        cand, ref = _random_graph(rng), _random_graph(rng)
        counter = _reference_counter(ref)
        smart = _smart_init(cand, ref)
        smart_score = _matched_count(cand, counter, smart)
        climbed = _hill_climb(cand, counter, ref.entity_count, smart)
        optimum = smatch_exhaustive(cand, ref).matched
        assert smart_score <= climbed <= optimum


def test_smatch_empty_convention():
    empty = AmrGraph()
    score = smatch(empty, empty)
    assert (score.precision, score.recall, score.f1) == (0.0, 0.0, 0.0)
    assert score.candidate_total == score.reference_total == 0


# --- exact match ------------------------------------------------------------------


def test_em_positional_membership():
    assert exact_match_at_k(["a", "b"], "b", 1) == 0
    assert exact_match_at_k(["a", "b"], "b", 2) == 1


def test_em_whitespace_normalization():
    assert exact_match_at_k(["(f  :a   1L)  "], "(f :a 1L)", 1) == 1
    assert exact_match_at_k(["(f :a 1L)\n"], " (f :a 1L)", 1) == 1


def test_em_monotone_in_k():
    rng = np.random.default_rng(6)
    pool = [f"(h{i})" for i in range(5)]
    for _ in range(50):
        hyps = [pool[int(i)] for i in rng.integers(0, 5, size=4)]
        ref = pool[int(rng.integers(5))]
        values = [exact_match_at_k(hyps, ref, k) for k in range(1, 5)]
        assert all(a <= b for a, b in zip(values, values[1:]))


def test_em_invalid_k():
    with pytest.raises(ValueError):
        exact_match_at_k(["a"], "a", 0)


# --- report helpers ----------------------------------------------------------------


def test_score_example_and_aggregate():
    examples = [
        score_example([FULL_PARSE, "(Unk)"], FULL_PARSE, 3),
        score_example(["(Unk)", FULL_PARSE], FULL_PARSE, 3),
        score_example(["(Unk)"], FULL_PARSE, 3),
    ]
    assert examples[0]["em"] == {"1": 1, "2": 1, "3": 1}
    assert examples[1]["em"] == {"1": 0, "2": 1, "3": 1}
    agg = aggregate_examples(examples, 3)
    assert agg["em@1"] == pytest.approx(1 / 3)
    assert agg["em@2"] == pytest.approx(2 / 3)
    assert agg["smatch"]["matched"] == sum(e["smatch"]["matched"] for e in examples)
    # micro f from summed counts
    assert 0.0 <= agg["smatch"]["f"] <= 1.0


def test_score_example_unparseable_hypothesis_scores_zero():
    result = score_example(["((((", ""], FULL_PARSE, 2)
    assert result["smatch"]["p"] == 0.0
    assert result["smatch"]["candidate_total"] == 0
