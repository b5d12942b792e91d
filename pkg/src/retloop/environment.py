"""LM environments: prompt construction, reference scoring, hypothesis
generation, and the per-step reward.

An environment exposes score(prompt, reference) -> log P(reference | prompt)
and generate(prompt, beams). The per-step reward is the increase in the
reference's probability when one exemplar is appended to the prompt.
"""
from __future__ import annotations

import math
import re
import threading
import time
from abc import ABC, abstractmethod
from functools import lru_cache
from typing import Callable, Sequence

from .errors import ConfigError, EnvProtocolError, TransportError
from .evaluation import (
    AmrConversionError,
    SexprParseError,
    Str,
    Sym,
    parse_sexpr,
    parse_to_amr,
    print_sexpr,
)

PROMPT_HEADER = "Let's translate what a human user says into what a computer might say."

_COMPLETED_RE = re.compile(r"^Computer: (.+)$", re.MULTILINE)
_HUMAN_RE = re.compile(r"^Human: (.*)$", re.MULTILINE)


def render_prompt(exemplars: Sequence, query: str) -> str:
    """Render the fixed prompt template for an exemplar sequence and a query.

    A pure function of its inputs: header line, one "Human/Computer" block
    per exemplar, then the query block with an open "Computer:" line.
    """
    blocks = [PROMPT_HEADER]
    blocks += [f"Human: {ex.input_text}\nComputer: {ex.output_text}" for ex in exemplars]
    blocks.append(f"Human: {query}\nComputer:")
    return "\n\n".join(blocks)


class LmEnvironment(ABC):
    """Scoring/generation interface with per-instance memoization.

    score() must return a finite log-probability <= 0 and be a pure function
    of (prompt, reference); generate() returns at most `beams` hypotheses in
    descending score order. The memo tables are lock-protected so parallel
    rollout workers may share one environment.
    """

    def __init__(self):
        self._score_memo: dict[tuple[str, str], float] = {}
        self._generate_memo: dict[tuple[str, int], list[tuple[str, float]]] = {}
        self._lock = threading.Lock()

    def score(self, prompt: str, reference: str) -> float:
        key = (prompt, reference)
        with self._lock:
            if key in self._score_memo:
                return self._score_memo[key]
        result = float(self._score_impl(prompt, reference))
        if not math.isfinite(result) or result > 0.0:
            raise EnvProtocolError(f"environment produced an invalid log-probability: {result}")
        with self._lock:
            self._score_memo[key] = result
        return result

    def generate(self, prompt: str, beams: int) -> list[tuple[str, float]]:
        if beams < 1:
            raise ValueError(f"beams must be >= 1, got {beams}")
        key = (prompt, beams)
        with self._lock:
            if key in self._generate_memo:
                return list(self._generate_memo[key])
        result = list(self._generate_impl(prompt, beams))[:beams]
        with self._lock:
            self._generate_memo[key] = result
        return list(result)

    @abstractmethod
    def _score_impl(self, prompt: str, reference: str) -> float: ...

    @abstractmethod
    def _generate_impl(self, prompt: str, beams: int) -> list[tuple[str, float]]: ...


def sequence_probability(env: LmEnvironment, prompt: str, reference: str,
                         length_normalize: bool = False) -> float:
    """exp of the environment score; optionally a per-token geometric mean."""
    lp = env.score(prompt, reference)
    if length_normalize:
        lp /= max(1, len(reference.split()))
    return math.exp(lp)


def reward(env: LmEnvironment, query: str, reference: str, prev_exemplars: Sequence,
           new_exemplar, length_normalize: bool = False) -> float:
    """Increase in the reference's probability from appending one exemplar."""
    before = sequence_probability(env, render_prompt(prev_exemplars, query), reference,
                                  length_normalize)
    after = sequence_probability(
        env, render_prompt(list(prev_exemplars) + [new_exemplar], query), reference,
        length_normalize,
    )
    return after - before


def completed_outputs(prompt: str) -> list[str]:
    """Exemplar outputs present in a rendered prompt (the trailing open line excluded)."""
    return _COMPLETED_RE.findall(prompt)


def final_query(prompt: str) -> str:
    matches = _HUMAN_RE.findall(prompt)
    if not matches:
        raise EnvProtocolError("prompt has no Human line")
    return matches[-1]


# --- structural rules for the synthetic oracle ------------------------------


def _const_kind(constant: str) -> str:
    return "<str>" if constant.startswith('"') else constant


@lru_cache(maxsize=None)
def structure_rules(parse_text: str) -> frozenset[str]:
    """Structural units of a parse: instance labels, edges, and attribute kinds.

    Falls back to token bigrams when the text is not a well-formed parse, so
    the oracle stays total over arbitrary strings.
    """
    try:
        graph = parse_to_amr(parse_text)
    except (SexprParseError, AmrConversionError):
        toks = parse_text.split()
        return frozenset(f"tok:{a} {b}" for a, b in zip(toks, toks[1:]))
    labels = {t.source: str(t.target) for t in graph.triples if t.relation == "instance"}
    rules = set()
    for t in graph.triples:
        if t.relation == "instance":
            rules.add(f"inst:{t.target}")
        elif isinstance(t.target, int):
            rules.add(f"edge:{labels[t.source]}.{t.relation}>{labels[t.target]}")
        else:
            rules.add(f"attr:{labels[t.source]}.{t.relation}>{_const_kind(t.target)}")
    return frozenset(rules)


def _coverage(prompt: str, reference: str) -> tuple[float, frozenset[str]]:
    ref_rules = structure_rules(reference)
    if not ref_rules:
        return 1.0, frozenset()
    covered = set()
    for output in completed_outputs(prompt):
        covered |= structure_rules(output) & ref_rules
    return len(covered) / len(ref_rules), frozenset(covered)


class SyntheticOracleEnv(LmEnvironment):
    """Deterministic stand-in for a completion-scoring LM.

    log P(reference | prompt) = -scale * (1 - coverage), where coverage is
    the fraction of the reference's structural rules that appear in at least
    one completed exemplar output of the prompt. An exemplar therefore helps
    exactly when it contributes structure the target parse needs, and the
    reward telescopes by construction.

    generate() needs a resolver mapping a query text to its reference parse
    (the task generator provides one); the top hypothesis is the reference
    parse with uncovered substructure pruned, followed by deterministically
    degraded variants.
    """

    def __init__(self, resolver: Callable[[str], str] | None = None, scale: float = 5.0):
        super().__init__()
        if scale <= 0:
            raise ConfigError(f"coverage scale must be positive, got {scale}")
        self.resolver = resolver
        self.scale = scale

    def _score_impl(self, prompt: str, reference: str) -> float:
        coverage, _ = _coverage(prompt, reference)
        return -self.scale * (1.0 - coverage)

    def _generate_impl(self, prompt: str, beams: int) -> list[tuple[str, float]]:
        if self.resolver is None:
            raise EnvProtocolError("synthetic generation requires a query resolver")
        reference = self.resolver(final_query(prompt))
        coverage, covered = _coverage(prompt, reference)
        base = -self.scale * (1.0 - coverage)
        first = reference if coverage == 1.0 else _prune_uncovered(reference, covered)
        hypotheses = [first]
        depth = 3
        while len(hypotheses) < beams and depth >= 1:
            pruned = _prune_below_depth(hypotheses[-1], depth)
            if pruned != hypotheses[-1]:
                hypotheses.append(pruned)
            depth -= 1
        while len(hypotheses) < beams:
            hypotheses.append("(Unk)")
        return [(h, base - 0.3 * i) for i, h in enumerate(hypotheses[:beams])]


_UNK = [Sym("Unk")]


def _iter_args(node: list):
    """Yield (relation, value) pairs the same way the triple conversion does."""
    args = node[1:]
    i = 0
    positional = 0
    while i < len(args):
        arg = args[i]
        if isinstance(arg, Sym) and arg.startswith(":"):
            yield str(arg)[1:], args[i + 1]
            i += 2
        else:
            yield f"ARG{positional}", arg
            positional += 1
            i += 1


def _prune_uncovered(reference: str, covered: frozenset[str]) -> str:
    """Rebuild the reference with uncovered edges replaced and uncovered
    attributes dropped; mirrors an LM that only reproduces seen structure."""
    try:
        tree = parse_sexpr(reference)
    except SexprParseError:
        return reference

    def rebuild(node):
        head = node[0]
        out = [head]
        for relation, val in _iter_args(node):
            marker = Sym(f":{relation}") if not relation.startswith("ARG") else None
            if isinstance(val, list):
                rule = f"edge:{head}.{relation}>{val[0]}"
                child = rebuild(val) if rule in covered else list(_UNK)
                out += [marker, child] if marker else [child]
            else:
                const = f'"{val}"' if isinstance(val, Str) else str(val)
                rule = f"attr:{head}.{relation}>{_const_kind(const)}"
                if rule in covered:
                    out += [marker, val] if marker else [val]
        return out

    if not isinstance(tree, list):
        return reference
    return print_sexpr(rebuild(tree))


def _prune_below_depth(parse_text: str, max_depth: int) -> str:
    try:
        tree = parse_sexpr(parse_text)
    except SexprParseError:
        return parse_text

    def rebuild(node, depth):
        if not isinstance(node, list):
            return node
        if depth >= max_depth:
            return list(_UNK)
        return [node[0]] + [
            item if not isinstance(item, list) else rebuild(item, depth + 1)
            for item in node[1:]
        ]

    if not isinstance(tree, list):
        return parse_text
    return print_sexpr(rebuild(tree, 0))


# --- remote completion-API environment ---------------------------------------


def _requests_post(url: str, payload: dict, timeout: float) -> dict:
    import requests

    resp = requests.post(url, json=payload, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


class RemoteLmEnv(LmEnvironment):
    """Completion-API client: scores references via echoed token logprobs.

    Scoring posts {"prompt": prompt + reference, "max_tokens": 0,
    "echo": true, "logprobs": true} and sums the logprobs of tokens whose
    text offset falls inside the reference suffix. Generation requests
    `beams` completions and returns (text, cumulative logprob) descending.
    """

    def __init__(self, endpoint: str, model: str = "", timeout_s: float = 30.0,
                 temperature: float = 0.5, max_tokens: int = 256,
                 max_attempts: int = 3, retry_wait_s: float = 0.5, post=_requests_post):
        super().__init__()
        if not endpoint:
            raise ConfigError("remote environment requires a non-empty endpoint")
        self.endpoint = endpoint
        self.model = model
        self.timeout_s = timeout_s
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.max_attempts = max_attempts
        self.retry_wait_s = retry_wait_s
        self._post = post

    def _request(self, payload: dict) -> dict:
        if self.model:
            payload = {"model": self.model, **payload}
        last_error = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                return self._post(self.endpoint, payload, self.timeout_s)
            except (OSError, ValueError) as exc:
                last_error = exc
                if attempt < self.max_attempts:
                    time.sleep(self.retry_wait_s)
        raise TransportError(
            f"environment request to {self.endpoint} failed: {last_error}",
            attempts=self.max_attempts,
        )

    def _score_impl(self, prompt: str, reference: str) -> float:
        body = self._request(
            {"prompt": prompt + reference, "max_tokens": 0, "echo": True, "logprobs": True}
        )
        try:
            logprobs = body["choices"][0]["logprobs"]
            offsets = logprobs["text_offset"]
            token_lps = logprobs["token_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EnvProtocolError(f"unexpected scoring payload: {exc}", payload=body) from exc
        boundary = len(prompt)
        total = sum(
            lp for off, lp in zip(offsets, token_lps) if off >= boundary and lp is not None
        )
        return min(float(total), 0.0)

    def _generate_impl(self, prompt: str, beams: int) -> list[tuple[str, float]]:
        body = self._request(
            {
                "prompt": prompt,
                "n": beams,
                "max_tokens": self.max_tokens,
                "temperature": self.temperature,
                "logprobs": True,
                "stop": ["\n"],
            }
        )
        try:
            choices = body["choices"]
            out = []
            for choice in choices:
                token_lps = choice["logprobs"]["token_logprobs"]
                score = float(sum(lp for lp in token_lps if lp is not None))
                out.append((choice["text"], score))
        except (KeyError, IndexError, TypeError) as exc:
            raise EnvProtocolError(f"unexpected generation payload: {exc}", payload=body) from exc
        out.sort(key=lambda pair: -pair[1])
        return out


def build_env(config, resolver=None) -> LmEnvironment:
    """Construct the environment selected by `env.kind`."""
    kind = config["env.kind"]
    if kind == "synthetic":
        return SyntheticOracleEnv(resolver=resolver, scale=config["env.coverage_scale"])
    if kind == "remote":
        return RemoteLmEnv(
            endpoint=config["env.endpoint"],
            model=config["env.model"],
            timeout_s=config["env.timeout_s"],
            temperature=config["env.temperature"],
            max_tokens=config["env.max_tokens"],
        )
    raise ConfigError(f"unknown env.kind: {kind!r}")
