"""Action side of the retrieval MDP.

A query projection maps the recurrent state to a query vector; dot products
against exemplar embeddings (divided by the temperature `beta`) are the
policy logits. Greedy decoding is an exact inner-product search; training
samples from a k-candidate truncated policy built by stratified sampling
over a top-B score buffer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .store import ExemplarStore, mips_top


@dataclass
class PolicyParams:
    """Affine query projection plus the score temperature."""

    wq: np.ndarray
    bq: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")

    @property
    def dim(self) -> int:
        return self.bq.shape[0]


def query_vector(params: PolicyParams, state: np.ndarray) -> np.ndarray:
    """Map a state to a query vector: wq @ state + bq."""
    state = np.asarray(state, dtype=float)
    if state.shape != (params.dim,):
        raise ValueError(f"state shape {state.shape} does not match policy dim {params.dim}")
    return params.wq @ state + params.bq


def greedy_step(
    params: PolicyParams,
    state: np.ndarray,
    store: ExemplarStore,
    exclude=(),
) -> tuple[int, float]:
    """Argmax of the policy score over non-excluded exemplars (exact MIPS)."""
    top = mips_top(store, query_vector(params, state), 1, exclude)
    if not top:
        raise ValueError("all exemplars are excluded")
    return top[0]


@dataclass
class TruncatedPolicy:
    """Sampling distribution over k candidate exemplars.

    `raw_scores` are the pre-renormalization logits dot(Q(s), emb) / beta;
    `probs` are their softmax at the renormalization temperature.
    """

    ids: np.ndarray
    probs: np.ndarray
    raw_scores: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int)
        self.probs = np.asarray(self.probs, dtype=float)
        self.raw_scores = np.asarray(self.raw_scores, dtype=float)
        k = len(self.ids)
        if k == 0:
            raise ValueError("truncated policy must contain at least one candidate")
        if len(set(self.ids.tolist())) != k:
            raise ValueError("candidate ids must be distinct")
        if abs(float(self.probs.sum()) - 1.0) > 1e-6 or np.any(self.probs <= 0.0):
            raise ValueError("probabilities must be positive and sum to 1")

    def __len__(self) -> int:
        return len(self.ids)


def renormalize(raw_scores: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of raw scores at the given temperature (shift-invariant)."""
    if temperature <= 0:
        raise ConfigError(f"renormalization temperature must be positive, got {temperature}")
    z = np.asarray(raw_scores, dtype=float) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def stratum_sizes(pool: int, strata: int) -> list[int]:
    """Split `pool` items into contiguous strata as equal as possible, earlier larger."""
    base, rem = divmod(pool, strata)
    return [base + 1 if i < rem else base for i in range(strata)]


def stratified_policy(
    params: PolicyParams,
    state: np.ndarray,
    store: ExemplarStore,
    exclude,
    buffer_size: int,
    k: int,
    strata: int,
    beta_renorm: float,
    rng: np.random.Generator,
) -> TruncatedPolicy:
    """Build the k-candidate truncated policy by stratified sampling.

    From the top `buffer_size` exemplars by policy score, the top k/strata
    are kept deterministically; the remainder is split, in score order, into
    strata - 1 contiguous blocks, and k/strata ids are drawn uniformly
    without replacement from each block. The k raw scores are renormalized
    with a softmax at `beta_renorm`.
    """
    exclude = set(exclude)
    if strata < 2:
        raise ConfigError(f"need at least 2 strata, got {strata}")
    if k % strata != 0:
        raise ConfigError(f"strata count {strata} must divide k={k}")
    if buffer_size < k:
        raise ConfigError(f"buffer size {buffer_size} is smaller than k={k}")
    if buffer_size > len(store) - len(exclude):
        raise ConfigError(
            f"buffer size {buffer_size} exceeds available exemplars "
            f"({len(store)} - {len(exclude)} excluded)"
        )

    query = query_vector(params, state)
    top = mips_top(store, query, buffer_size, exclude)
    ids = np.array([i for i, _ in top], dtype=int)
    raw = np.array([s for _, s in top], dtype=float) / params.beta

    per = k // strata
    positions = list(range(per))
    offset = per
    for size in stratum_sizes(buffer_size - per, strata - 1):
        block = np.arange(offset, offset + size)
        positions.extend(int(p) for p in rng.choice(block, size=per, replace=False))
        offset += size
    positions = sorted(positions)

    sel = np.array(positions, dtype=int)
    return TruncatedPolicy(ids[sel], renormalize(raw[sel], beta_renorm), raw[sel])


def sample_action(tp: TruncatedPolicy, rng: np.random.Generator) -> tuple[int, float]:
    """Draw an id from the truncated policy; returns (id, its behavior probability)."""
    idx = int(rng.choice(len(tp), p=tp.probs))
    return int(tp.ids[idx]), float(tp.probs[idx])


def log_prob_and_entropy(tp: TruncatedPolicy, exemplar_id: int) -> tuple[float, float]:
    """Natural-log probability of `exemplar_id` under tp, and tp's entropy."""
    matches = np.nonzero(tp.ids == exemplar_id)[0]
    if len(matches) == 0:
        raise ValueError(f"id {exemplar_id} is not a candidate of this policy")
    log_p = float(np.log(tp.probs[matches[0]]))
    entropy = float(-(tp.probs * np.log(tp.probs)).sum())
    return log_p, entropy
