"""Exemplar dataset: ingestion, embedding matrix, exact inner-product search, BM25.

The store is immutable after ingestion; every ranking function is a pure
read, so concurrent rollout workers may share one store.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, IngestError

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Whitespace-and-punctuation tokenizer: lowercased runs of word characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Exemplar:
    """One (input text, output parse) training pair with a stable id."""

    id: int
    input_text: str
    output_text: str


class ExemplarStore:
    """Exemplars plus their precomputed embedding matrix (one row per exemplar)."""

    def __init__(self, exemplars: Sequence[Exemplar], embeddings: np.ndarray):
        embeddings = np.asarray(embeddings, dtype=float)
        if embeddings.ndim != 2 or embeddings.shape[0] != len(exemplars):
            raise ConfigError(
                f"embedding matrix shape {embeddings.shape} does not match "
                f"{len(exemplars)} exemplars"
            )
        if not np.all(np.isfinite(embeddings)):
            raise ConfigError("embedding matrix contains non-finite entries")
        for pos, ex in enumerate(exemplars):
            if ex.id != pos:
                raise ConfigError(f"exemplar ids must be contiguous from 0, got {ex.id} at {pos}")
        self.exemplars = list(exemplars)
        self.embeddings = embeddings
        self.dim = int(embeddings.shape[1])
        self._bm25 = _Bm25Index([tokenize(e.input_text) for e in self.exemplars])

    def __len__(self) -> int:
        return len(self.exemplars)

    def __getitem__(self, exemplar_id: int) -> Exemplar:
        return self.exemplars[exemplar_id]


def ingest(records: Iterable[tuple[str, str]], encoder, embed_pair: bool = False) -> ExemplarStore:
    """Build a store from (input_text, output_text) pairs in stream order.

    Keys are embedded from the input text alone unless `embed_pair` is set,
    in which case input and output are joined with a newline before encoding.
    """
    exemplars: list[Exemplar] = []
    vectors: list[np.ndarray] = []
    for pos, (input_text, output_text) in enumerate(records):
        if not input_text:
            raise IngestError(f"record {pos}: input text is empty")
        key = f"{input_text}\n{output_text}" if embed_pair else input_text
        vec = np.asarray(encoder.embed(key), dtype=float)
        if vec.shape != (encoder.dim,):
            raise ConfigError(
                f"encoder produced shape {vec.shape}, expected ({encoder.dim},)"
            )
        exemplars.append(Exemplar(pos, input_text, output_text))
        vectors.append(vec)
    if not exemplars:
        raise IngestError("cannot ingest an empty stream")
    return ExemplarStore(exemplars, np.stack(vectors))


def load_jsonl(path) -> list[tuple[str, str]]:
    """Read a JSONL dataset with required string fields "input" and "output"."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise IngestError(f"{path}: line {lineno}: expected an object")
            for field in ("input", "output"):
                if field not in obj:
                    raise IngestError(f"{path}: line {lineno}: missing \"{field}\" field")
                if not isinstance(obj[field], str):
                    raise IngestError(f"{path}: line {lineno}: \"{field}\" must be a string")
            pairs.append((obj["input"], obj["output"]))
    if not pairs:
        raise IngestError(f"{path}: dataset contains no records")
    return pairs


def mips_top(
    store: ExemplarStore,
    query: np.ndarray,
    n: int,
    exclude: Iterable[int] = (),
) -> list[tuple[int, float]]:
    """Exact maximum-inner-product search.

    Returns up to `n` (id, score) pairs maximizing dot(query, embedding[id])
    over ids not in `exclude`, descending by score with ties broken by the
    smaller id. Fewer than `n` results are returned when exclusions shrink
    the pool below `n`.
    """
    query = np.asarray(query, dtype=float)
    if query.shape != (store.dim,):
        raise ValueError(f"query shape {query.shape} does not match store dim {store.dim}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    excluded = set(exclude)
    scores = store.embeddings @ query
    order = np.lexsort((np.arange(len(store)), -scores))
    out = []
    for idx in order:
        if int(idx) in excluded:
            continue
        out.append((int(idx), float(scores[idx])))
        if len(out) == n:
            break
    return out


def bm25_top(store: ExemplarStore, query_text: str, n: int) -> list[tuple[int, float]]:
    """Okapi BM25 over input texts (k1=1.2, b=0.75), top-n with ties by smaller id."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    scores = store._bm25.scores(tokenize(query_text))
    order = np.lexsort((np.arange(len(store)), -scores))
    return [(int(i), float(scores[i])) for i in order[:n]]


class _Bm25Index:
    """Okapi BM25 with the non-negative idf variant log(1 + (N - df + 0.5)/(df + 0.5))."""

    def __init__(self, doc_tokens: list[list[str]], k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.term_freqs = [Counter(toks) for toks in doc_tokens]
        self.doc_lens = np.array([len(toks) for toks in doc_tokens], dtype=float)
        self.avgdl = float(self.doc_lens.mean()) if len(doc_tokens) else 0.0
        df = Counter()
        for tf in self.term_freqs:
            df.update(tf.keys())
        n_docs = len(doc_tokens)
        self.idf = {
            term: math.log(1.0 + (n_docs - count + 0.5) / (count + 0.5))
            for term, count in df.items()
        }

    def scores(self, query_tokens: list[str]) -> np.ndarray:
        out = np.zeros(len(self.term_freqs))
        if not query_tokens or self.avgdl == 0.0:
            return out
        for i, tf in enumerate(self.term_freqs):
            norm = self.k1 * (1.0 - self.b + self.b * self.doc_lens[i] / self.avgdl)
            s = 0.0
            for term in query_tokens:
                freq = tf.get(term, 0)
                if freq:
                    s += self.idf[term] * freq * (self.k1 + 1.0) / (freq + norm)
            out[i] = s
        return out


# --- store serialization (run-directory artifact) -------------------------

_META_NAME = "meta.json"
_EXEMPLARS_NAME = "exemplars.jsonl"
_EMBEDDINGS_NAME = "embeddings.npy"


def save_store(store: ExemplarStore, directory, encoder_meta: dict | None = None) -> None:
    """Write the store as deterministic bytes: identical inputs, identical files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": 1,
        "count": len(store),
        "dim": store.dim,
        "encoder": encoder_meta or {},
    }
    (directory / _META_NAME).write_text(
        json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )
    with open(directory / _EXEMPLARS_NAME, "w", encoding="utf-8") as fh:
        for ex in store.exemplars:
            fh.write(
                json.dumps(
                    {"id": ex.id, "input": ex.input_text, "output": ex.output_text},
                    sort_keys=True,
                    separators=(",", ":"),
                    ensure_ascii=False,
                )
                + "\n"
            )
    with open(directory / _EMBEDDINGS_NAME, "wb") as fh:
        np.save(fh, store.embeddings)


def load_store(directory) -> ExemplarStore:
    directory = Path(directory)
    meta = json.loads((directory / _META_NAME).read_text(encoding="utf-8"))
    exemplars = []
    with open(directory / _EXEMPLARS_NAME, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                exemplars.append(Exemplar(obj["id"], obj["input"], obj["output"]))
    embeddings = np.load(directory / _EMBEDDINGS_NAME)
    if len(exemplars) != meta["count"]:
        raise IngestError(f"{directory}: exemplar count does not match metadata")
    return ExemplarStore(exemplars, embeddings)
