"""retloop: stateful exemplar retrieval for in-context learning.

A retriever that picks prompt exemplars one step at a time, tracking its
choices in a recurrent state and trained with PPO against an LM environment
that scores reference completions.
"""

from .encoding import Embedder, HashingEmbedder, RemoteEmbedder
from .environment import (
    LmEnvironment,
    RemoteLmEnv,
    SyntheticOracleEnv,
    render_prompt,
    reward,
)
from .evaluation import (
    AmrGraph,
    SmatchScore,
    exact_match_at_k,
    parse_sexpr,
    smatch,
    to_amr,
)
from .model import RetrieverModel, init_identity, init_random, iterative_trajectory, load_model, save_model
from .policy import PolicyParams, TruncatedPolicy, greedy_step, query_vector, sample_action, stratified_policy
from .recurrent import GruParams, InitialState, ValueHead, gru_backward, gru_step, init_state, value
from .store import Exemplar, ExemplarStore, bm25_top, ingest, load_jsonl, mips_top
from .trainer import PpoConfig, ReplayBuffer, Trainer, TransitionRecord, gae, ppo_loss, rollout

__version__ = "0.1.0"

__all__ = [
    "Embedder", "HashingEmbedder", "RemoteEmbedder",
    "LmEnvironment", "SyntheticOracleEnv", "RemoteLmEnv", "render_prompt", "reward",
    "AmrGraph", "SmatchScore", "exact_match_at_k", "parse_sexpr", "smatch", "to_amr",
    "RetrieverModel", "init_identity", "init_random", "iterative_trajectory",
    "load_model", "save_model",
    "PolicyParams", "TruncatedPolicy", "greedy_step", "query_vector",
    "sample_action", "stratified_policy",
    "GruParams", "InitialState", "ValueHead", "gru_backward", "gru_step",
    "init_state", "value",
    "Exemplar", "ExemplarStore", "bm25_top", "ingest", "load_jsonl", "mips_top",
    "PpoConfig", "ReplayBuffer", "Trainer", "TransitionRecord", "gae", "ppo_loss", "rollout",
    "__version__",
]
