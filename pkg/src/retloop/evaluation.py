"""End-task metrics: exact match over beam hypotheses, and SMatch over
relation triples derived from Lisp-style semantic parses.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class Sym(str):
    """Bare symbol or typed literal token (e.g. Yield, :output, 1L)."""

    __slots__ = ()

    def __repr__(self):
        return f"Sym({str.__repr__(self)})"


class Str(str):
    """Double-quoted string literal with quotes stripped."""

    __slots__ = ()

    def __repr__(self):
        return f"Str({str.__repr__(self)})"


SExpr = Union[Sym, Str, list]


class SexprParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


_DELIMS = set(' \t\r\n()"')


def parse_sexpr(text: str) -> SExpr:
    """Parse one s-expression; raises SexprParseError with a byte offset."""
    pos = 0
    n = len(text)

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos] in " \t\r\n":
            pos += 1

    def parse_string() -> Str:
        nonlocal pos
        start = pos
        pos += 1  # opening quote
        out = []
        while pos < n:
            c = text[pos]
            if c == "\\":
                if pos + 1 >= n:
                    raise SexprParseError("unterminated string", start)
                out.append(text[pos + 1])
                pos += 2
            elif c == '"':
                pos += 1
                return Str("".join(out))
            else:
                out.append(c)
                pos += 1
        raise SexprParseError("unterminated string", start)

    def parse_atom() -> Sym:
        nonlocal pos
        start = pos
        while pos < n and text[pos] not in _DELIMS:
            pos += 1
        return Sym(text[start:pos])

    def parse_form() -> SExpr:
        nonlocal pos
        skip_ws()
        if pos >= n:
            raise SexprParseError("unexpected end of input", n)
        c = text[pos]
        if c == "(":
            open_pos = pos
            pos += 1
            items = []
            while True:
                skip_ws()
                if pos >= n:
                    raise SexprParseError("unbalanced parenthesis", n)
                if text[pos] == ")":
                    pos += 1
                    return items
                items.append(parse_form())
        if c == ")":
            raise SexprParseError("unexpected )", pos)
        if c == '"':
            return parse_string()
        return parse_atom()

    tree = parse_form()
    skip_ws()
    if pos != n:
        raise SexprParseError("trailing content", pos)
    return tree


def print_sexpr(tree: SExpr) -> str:
    """Render a tree back to text; parse(print(t)) is equivalent to t."""
    if isinstance(tree, Str):
        escaped = tree.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(tree, Sym):
        return str(tree)
    return "(" + " ".join(print_sexpr(item) for item in tree) + ")"


# --- conversion of parses to relation triples ------------------------------

INSTANCE = "instance"


class AmrConversionError(ValueError):
    pass


@dataclass(frozen=True)
class AmrTriple:
    """(relation, source entity, target); target is an entity id or a constant string."""

    relation: str
    source: int
    target: Union[int, str]

    def render(self) -> str:
        tgt = f"${self.target}" if isinstance(self.target, int) else str(self.target)
        return f"{self.relation}(${self.source}, {tgt})"


@dataclass
class AmrGraph:
    triples: list[AmrTriple] = field(default_factory=list)
    entity_count: int = 0

    def render_triples(self) -> list[str]:
        return [t.render() for t in self.triples]

    def entity_label(self, entity: int) -> str:
        for t in self.triples:
            if t.relation == INSTANCE and t.source == entity:
                return str(t.target)
        raise KeyError(f"entity ${entity} has no instance triple")


def _constant_text(atom: SExpr) -> str:
    if isinstance(atom, Str):
        return f'"{atom}"'
    return str(atom)


def to_amr(parse: SExpr) -> AmrGraph:
    """Convert a parse tree to entities and relation triples.

    Each function application becomes an entity, numbered in pre-order from
    $0. Keyword parameters become relations; positional arguments become
    ARG0, ARG1, ...; atom arguments attach as constants.
    """
    graph = AmrGraph()
    counter = 0

    def visit(node: SExpr) -> int:
        nonlocal counter
        if not isinstance(node, list) or not node:
            raise AmrConversionError("expected a non-empty function application")
        head = node[0]
        if not isinstance(head, Sym) or head.startswith(":"):
            raise AmrConversionError(f"invalid function head: {head!r}")
        entity = counter
        counter += 1
        graph.triples.append(AmrTriple(INSTANCE, entity, str(head)))
        args = node[1:]
        i = 0
        positional = 0
        while i < len(args):
            arg = args[i]
            if isinstance(arg, Sym) and arg.startswith(":"):
                if i + 1 >= len(args):
                    raise AmrConversionError(f"keyword {arg} has no following value")
                relation = str(arg)[1:]
                val = args[i + 1]
                if isinstance(val, Sym) and val.startswith(":"):
                    raise AmrConversionError(f"keyword {val} found in value position")
                i += 2
            else:
                relation = f"ARG{positional}"
                positional += 1
                val = arg
                i += 1
            if isinstance(val, list):
                graph.triples.append(AmrTriple(relation, entity, counter))
                visit(val)
            else:
                graph.triples.append(AmrTriple(relation, entity, _constant_text(val)))
        return entity

    visit(parse)
    graph.entity_count = counter
    return graph


def parse_to_amr(text: str) -> AmrGraph:
    return to_amr(parse_sexpr(text))


# --- SMatch -----------------------------------------------------------------


@dataclass(frozen=True)
class SmatchScore:
    precision: float
    recall: float
    f1: float
    matched: int
    candidate_total: int
    reference_total: int


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def _score_from_counts(matched: int, cand: int, ref: int) -> SmatchScore:
    p = matched / cand if cand else 0.0
    r = matched / ref if ref else 0.0
    return SmatchScore(p, r, _f1(p, r), matched, cand, ref)


def _reference_counter(graph: AmrGraph) -> Counter:
    return Counter((t.relation, t.source, t.target) for t in graph.triples)


def _matched_count(candidate: AmrGraph, ref_counter: Counter, mapping: list[int]) -> int:
    mapped = Counter()
    for t in candidate.triples:
        src = mapping[t.source]
        if src < 0:
            continue
        tgt = t.target
        if isinstance(tgt, int):
            tgt = mapping[tgt]
            if tgt < 0:
                continue
        mapped[(t.relation, src, tgt)] += 1
    return sum(min(count, ref_counter[key]) for key, count in mapped.items())


def _instance_labels(graph: AmrGraph) -> dict[int, str]:
    return {t.source: str(t.target) for t in graph.triples if t.relation == INSTANCE}


def _smart_init(candidate: AmrGraph, reference: AmrGraph) -> list[int]:
    cand_labels = _instance_labels(candidate)
    ref_by_label: dict[str, list[int]] = {}
    for entity, label in _instance_labels(reference).items():
        ref_by_label.setdefault(label, []).append(entity)
    used = set()
    mapping = [-1] * candidate.entity_count
    for entity in range(candidate.entity_count):
        for target in ref_by_label.get(cand_labels.get(entity, ""), []):
            if target not in used:
                mapping[entity] = target
                used.add(target)
                break
    return mapping


def _random_init(candidate: AmrGraph, reference: AmrGraph, rng: np.random.Generator) -> list[int]:
    """Random restart biased toward label-consistent assignments."""
    cand_labels = _instance_labels(candidate)
    ref_by_label: dict[str, list[int]] = {}
    for entity, label in _instance_labels(reference).items():
        ref_by_label.setdefault(label, []).append(entity)
    n_cand, n_ref = candidate.entity_count, reference.entity_count
    mapping = [-1] * n_cand
    used: set[int] = set()
    for i in rng.permutation(n_cand):
        options = [t for t in ref_by_label.get(cand_labels.get(int(i), ""), []) if t not in used]
        if not options:
            options = [t for t in range(n_ref) if t not in used]
        if options:
            target = int(options[int(rng.integers(len(options)))])
            mapping[int(i)] = target
            used.add(target)
    return mapping


def _hill_climb(candidate: AmrGraph, ref_counter: Counter, n_ref: int, mapping: list[int]) -> int:
    """Steepest-ascent search.

    The neighborhood contains single moves, swaps, bump moves (claim an
    occupied target and relocate its previous owner), and joint assignment of
    two unmapped variables; the last is what lets a relation triple, which
    needs both endpoints placed at once, pull the alignment uphill.
    """
    best = _matched_count(candidate, ref_counter, mapping)
    n_cand = candidate.entity_count
    while True:
        best_gain = 0
        best_mapping = None

        def consider(trial):
            nonlocal best_gain, best_mapping
            gain = _matched_count(candidate, ref_counter, trial) - best
            if gain > best_gain:
                best_gain, best_mapping = gain, trial

        taken = {m: i for i, m in enumerate(mapping) if m >= 0}
        free = [t for t in range(n_ref) if t not in taken]
        unmapped = [i for i in range(n_cand) if mapping[i] < 0]
        for i in range(n_cand):
            # move to a free reference variable or unmap
            for target in free + [-1]:
                if target != mapping[i]:
                    trial = mapping.copy()
                    trial[i] = target
                    consider(trial)
            # claim an occupied target, relocating its owner
            for target, owner in taken.items():
                if owner == i:
                    continue
                trial = mapping.copy()
                trial[i], trial[owner] = target, mapping[i]
                consider(trial)  # swap
                for spill in free + [-1]:
                    bumped = mapping.copy()
                    bumped[i], bumped[owner] = target, spill
                    consider(bumped)
        # assign two unmapped variables at once
        for a_pos in range(len(unmapped)):
            for b_pos in range(a_pos + 1, len(unmapped)):
                for t1 in free:
                    for t2 in free:
                        if t1 == t2:
                            continue
                        trial = mapping.copy()
                        trial[unmapped[a_pos]] = t1
                        trial[unmapped[b_pos]] = t2
                        consider(trial)
        if best_mapping is None:
            return best
        mapping = best_mapping
        best += best_gain


def smatch(candidate: AmrGraph, reference: AmrGraph, restarts: int = 12, seed: int = 0) -> SmatchScore:
    """Best one-to-one variable alignment found by hill-climbing.

    Starts: one smart initialization seeded by matching instance labels, one
    empty mapping, and `restarts` label-biased random restarts; each climbs
    (see _hill_climb) until no move gains. Deterministic for a given seed.
    """
    cand_total = len(candidate.triples)
    ref_total = len(reference.triples)
    if cand_total == 0 or ref_total == 0:
        return _score_from_counts(0, cand_total, ref_total)
    ref_counter = _reference_counter(reference)
    rng = np.random.default_rng(seed)
    n_ref = reference.entity_count
    best = _hill_climb(candidate, ref_counter, n_ref, _smart_init(candidate, reference))
    # climbing from the empty mapping greedily assembles an alignment and
    # often lands in a different basin than the label-seeded starts
    best = max(best, _hill_climb(candidate, ref_counter, n_ref, [-1] * candidate.entity_count))
    for _ in range(restarts):
        start = _random_init(candidate, reference, rng)
        best = max(best, _hill_climb(candidate, ref_counter, n_ref, start))
    return _score_from_counts(best, cand_total, ref_total)


def smatch_exhaustive(candidate: AmrGraph, reference: AmrGraph) -> SmatchScore:
    """Exact optimum by enumerating all injective variable alignments.

    Only feasible for small graphs; used as the oracle for the hill-climber.
    """
    cand_total = len(candidate.triples)
    ref_total = len(reference.triples)
    if cand_total == 0 or ref_total == 0:
        return _score_from_counts(0, cand_total, ref_total)
    ref_counter = _reference_counter(reference)
    n_cand, n_ref = candidate.entity_count, reference.entity_count
    best = 0
    # Mapping more variables never lowers the match count, so enumerating the
    # maximal injective mappings suffices.
    if n_cand <= n_ref:
        for targets in itertools.permutations(range(n_ref), n_cand):
            mapping = list(targets)
            best = max(best, _matched_count(candidate, ref_counter, mapping))
    else:
        for sources in itertools.permutations(range(n_cand), n_ref):
            mapping = [-1] * n_cand
            for ref_var, cand_var in enumerate(sources):
                mapping[cand_var] = ref_var
            best = max(best, _matched_count(candidate, ref_counter, mapping))
    return _score_from_counts(best, cand_total, ref_total)


# --- exact match ------------------------------------------------------------


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def exact_match_at_k(hypotheses: list[str], reference: str, k: int) -> int:
    """1 iff any of the first k hypotheses equals the reference after
    whitespace normalization (runs collapsed, ends trimmed)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ref = _normalize_ws(reference)
    return int(any(_normalize_ws(h) == ref for h in hypotheses[:k]))


# --- per-example scoring and aggregation ------------------------------------


def score_example(hypotheses: list[str], reference: str, k_max: int,
                  smatch_restarts: int = 12) -> dict:
    """EM@1..k_max plus SMatch of the top hypothesis against the reference.

    A hypothesis (or reference) that fails to parse contributes an empty
    graph, scoring zero by the empty-graph convention.
    """
    em = {str(k): exact_match_at_k(hypotheses, reference, k) for k in range(1, k_max + 1)}
    try:
        ref_graph = parse_to_amr(reference)
    except (SexprParseError, AmrConversionError):
        ref_graph = AmrGraph()
    try:
        cand_graph = parse_to_amr(hypotheses[0]) if hypotheses else AmrGraph()
    except (SexprParseError, AmrConversionError):
        cand_graph = AmrGraph()
    sc = smatch(cand_graph, ref_graph, restarts=smatch_restarts)
    return {
        "em": em,
        "smatch": {
            "p": sc.precision,
            "r": sc.recall,
            "f": sc.f1,
            "matched": sc.matched,
            "candidate_total": sc.candidate_total,
            "reference_total": sc.reference_total,
        },
    }


def aggregate_examples(examples: list[dict], k_max: int, macro: bool = False) -> dict:
    """Corpus aggregates: mean EM@k plus micro-averaged SMatch (summed counts).

    With `macro` set, SMatch P/R/F are unweighted means of per-example values
    instead; the summed counts are reported either way.
    """
    n = len(examples)
    agg: dict = {f"em@{k}": 0.0 for k in range(1, k_max + 1)}
    matched = cand_total = ref_total = 0
    for ex in examples:
        for k in range(1, k_max + 1):
            agg[f"em@{k}"] += ex["em"][str(k)] / n
        matched += ex["smatch"]["matched"]
        cand_total += ex["smatch"]["candidate_total"]
        ref_total += ex["smatch"]["reference_total"]
    if macro:
        p = float(np.mean([ex["smatch"]["p"] for ex in examples]))
        r = float(np.mean([ex["smatch"]["r"] for ex in examples]))
        f = float(np.mean([ex["smatch"]["f"] for ex in examples]))
    else:
        p = matched / cand_total if cand_total else 0.0
        r = matched / ref_total if ref_total else 0.0
        f = _f1(p, r)
    agg["smatch"] = {
        "p": p,
        "r": r,
        "f": f,
        "matched": matched,
        "candidate_total": cand_total,
        "reference_total": ref_total,
    }
    return agg
