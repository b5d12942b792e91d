"""Seeded generator for a compositional toy semantic-parsing task.

Queries ask for an operation on an object under one or two constraints.
Store exemplars carry either a single constraint or a compound of a content
constraint (about/with/at ...) and a schedule constraint (date/time), but
compound exemplars only ever pair fields from a fixed training set of
combinations. Evaluation queries always combine two fields in held-out
pairings, so no single exemplar covers a query's full structure: covering
it requires assembling complementary exemplars.

Run `python -m retloop.synthetic OUT_DIR` to write dataset files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VERBS = [("find", "Find"), ("create", "Create"), ("delete", "Delete"), ("update", "Update")]
OBJECTS = [("event", "Event"), ("reminder", "Reminder"), ("message", "Message"), ("task", "Task")]

def _cross(prefixes, nouns):
    return [f"{p} {n}" for p in prefixes for n in nouns]


# content fields: long, distinctive value phrases
CONTENT_FIELDS = {
    "subject": ("about", _cross(
        ["the quarterly", "the annual", "the weekly", "the emergency"],
        ["budget review", "platform standup", "launch rehearsal",
         "performance cycle", "escalation call", "design critique"],
    )),
    "attendee": ("with", _cross(
        ["alice from", "bob from", "dana from", "victor from"],
        ["the accounting group", "the platform team", "the legal department",
         "the hiring panel", "the success desk", "the procurement office"],
    )),
    "location": ("at", _cross(
        ["the downtown", "the uptown", "the satellite", "the riverside"],
        ["office lobby", "conference wing", "innovation lab",
         "rooftop lounge", "auditorium hall", "courtyard pavilion"],
    )),
}

# schedule fields: short values
SCHEDULE_FIELDS = {
    "date": ("scheduled for", [
        "today", "tomorrow", "monday", "tuesday", "wednesday", "thursday",
        "friday", "sunday", "june third", "july first", "next week",
        "the ninth", "the twelfth", "month end", "this weekend", "saturday",
    ]),
    "time": ("starting at", [
        "noon", "9 am", "5 pm", "midnight", "8 30", "dawn", "10 15", "dusk",
        "1 pm", "7 45", "11 am", "half past six", "2 pm", "9 30", "4 pm", "3 15",
    ]),
}

# field pairings allowed in store compounds vs. held out for queries
TRAIN_FIELD_PAIRS = [("subject", "time"), ("attendee", "date"), ("location", "time")]
QUERY_FIELD_PAIRS = [("subject", "date"), ("attendee", "time"), ("location", "date")]


def _constraint(obj_sym: str, fld: str, value: str) -> str:
    return f'({obj_sym}.{fld}_? :obj (?~= "{value}"))'


def _single(verb_sym: str, obj_sym: str, fld: str, value: str) -> str:
    c = _constraint(obj_sym, fld, value)
    return f"(Yield :output ({verb_sym}{obj_sym} :constraint {c} :number 1L))"


def _compound(verb_sym: str, obj_sym: str, a: tuple[str, str], b: tuple[str, str]) -> str:
    ca = _constraint(obj_sym, a[0], a[1])
    cb = _constraint(obj_sym, b[0], b[1])
    return (
        f"(Yield :output ({verb_sym}{obj_sym} :constraint "
        f"(And :arg0 {ca} :arg1 {cb}) :number 1L))"
    )


def _field_text(fld: str, value: str) -> str:
    conn = (CONTENT_FIELDS.get(fld) or SCHEDULE_FIELDS[fld])[0]
    return f"{conn} {value}"


@dataclass
class SyntheticTask:
    """Generated corpus plus query splits; `resolver` maps any generated query
    text to its reference parse (the synthetic environment needs it)."""

    exemplars: list[tuple[str, str]]
    train_queries: list[tuple[str, str]]
    dev_queries: list[tuple[str, str]]
    test_queries: list[tuple[str, str]]
    _lookup: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for text, parse in (
            self.exemplars + self.train_queries + self.dev_queries + self.test_queries
        ):
            self._lookup[text] = parse

    def resolver(self, query_text: str) -> str:
        try:
            return self._lookup[query_text]
        except KeyError:
            raise KeyError(f"unknown query: {query_text!r}") from None


def _pick(rng: np.random.Generator, items):
    return items[int(rng.integers(len(items)))]


def _make_single(rng: np.random.Generator) -> tuple[str, str]:
    verb, verb_sym = _pick(rng, VERBS)
    obj, obj_sym = _pick(rng, OBJECTS)
    if rng.random() < 0.62:
        fld = _pick(rng, list(CONTENT_FIELDS))
        value = _pick(rng, CONTENT_FIELDS[fld][1])
    else:
        fld = _pick(rng, list(SCHEDULE_FIELDS))
        value = _pick(rng, SCHEDULE_FIELDS[fld][1])
    text = f"{verb} the {obj} {_field_text(fld, value)}"
    return text, _single(verb_sym, obj_sym, fld, value)


def _make_compound(rng: np.random.Generator, pairs) -> tuple[str, str]:
    verb, verb_sym = _pick(rng, VERBS)
    obj, obj_sym = _pick(rng, OBJECTS)
    fld_a, fld_b = _pick(rng, pairs)
    val_a = _pick(rng, CONTENT_FIELDS[fld_a][1])
    val_b = _pick(rng, SCHEDULE_FIELDS[fld_b][1])
    text = f"{verb} the {obj} {_field_text(fld_a, val_a)} {_field_text(fld_b, val_b)}"
    return text, _compound(verb_sym, obj_sym, (fld_a, val_a), (fld_b, val_b))


def _collect(rng, make, count, seen: set[str], max_tries: int = 200) -> list[tuple[str, str]]:
    out = []
    while len(out) < count:
        for _ in range(max_tries):
            text, parse = make(rng)
            if text not in seen:
                seen.add(text)
                out.append((text, parse))
                break
        else:
            raise RuntimeError(f"could not generate {count} unique examples")
    return out


def generate_task(
    seed: int,
    n_exemplars: int = 2000,
    n_train: int = 600,
    n_dev: int = 100,
    n_test: int = 200,
    compound_fraction: float = 0.3,
) -> SyntheticTask:
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    n_compound = int(round(n_exemplars * compound_fraction))
    exemplars = _collect(rng, _make_single, n_exemplars - n_compound, seen)
    exemplars += _collect(rng, lambda r: _make_compound(r, TRAIN_FIELD_PAIRS), n_compound, seen)
    order = rng.permutation(len(exemplars))
    exemplars = [exemplars[i] for i in order]

    make_query = lambda r: _make_compound(r, QUERY_FIELD_PAIRS)
    train_queries = _collect(rng, make_query, n_train, seen)
    dev_queries = _collect(rng, make_query, n_dev, seen)
    test_queries = _collect(rng, make_query, n_test, seen)
    return SyntheticTask(exemplars, train_queries, dev_queries, test_queries)


def write_jsonl(path, pairs: list[tuple[str, str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for text, parse in pairs:
            fh.write(json.dumps({"input": text, "output": parse}, ensure_ascii=False) + "\n")


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="write synthetic task datasets")
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--exemplars", type=int, default=2000)
    parser.add_argument("--train", type=int, default=600)
    parser.add_argument("--dev", type=int, default=100)
    parser.add_argument("--test", type=int, default=200)
    args = parser.parse_args(argv)

    task = generate_task(args.seed, args.exemplars, args.train, args.dev, args.test)
    out = Path(args.out_dir)
    write_jsonl(out / "exemplars.jsonl", task.exemplars)
    write_jsonl(out / "train.jsonl", task.train_queries)
    write_jsonl(out / "dev.jsonl", task.dev_queries)
    write_jsonl(out / "test.jsonl", task.test_queries)
    print(
        f"wrote {len(task.exemplars)} exemplars, {len(task.train_queries)} train, "
        f"{len(task.dev_queries)} dev, {len(task.test_queries)} test queries to {out}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
