"""Dotted-key run configuration with documented defaults.

Config files are plain text, one `key = value` per line (# comments allowed);
values are parsed as JSON fragments with bare words falling back to strings.
Command-line overrides win over file values; unknown keys are rejected.
"""
from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .trainer import PpoConfig

DEFAULTS: dict[str, tuple] = {
    "seed": (0, "global random seed"),
    # encoder
    "encoder.kind": ("hashing", "hashing | remote"),
    "encoder.dim": (64, "embedding dimension d"),
    "encoder.seed": (13, "hash seed for the hashing embedder"),
    "encoder.embed_pair": (False, "embed input+output instead of input only"),
    "encoder.endpoint": ("", "embedding service URL (remote kind)"),
    "encoder.timeout_s": (30.0, "embedding request timeout"),
    # policy
    "policy.beta": (1.0, "score temperature in the policy logits"),
    "policy.beta_renorm": (5.0, "softmax temperature for the truncated policy"),
    "policy.buffer_B": (768, "action buffer size for stratified sampling"),
    "policy.k_candidates": (8, "candidates kept in the truncated policy"),
    "policy.strata_Ns": (4, "stratum count (must divide k_candidates)"),
    "init.kind": ("random", "random | identity (diagnostic)"),
    # environment
    "env.kind": ("synthetic", "synthetic | remote"),
    "env.endpoint": ("", "completion API URL (remote kind)"),
    "env.model": ("", "model name passed to the completion API"),
    "env.timeout_s": (30.0, "environment request timeout"),
    "env.beams": (3, "beam count requested from generate()"),
    "env.temperature": (0.5, "sampling temperature (unused by the synthetic env)"),
    "env.max_tokens": (256, "generation budget for the remote env"),
    "env.coverage_scale": (5.0, "log-probability scale of the synthetic oracle"),
    "reward.length_normalize": (False, "use per-token geometric-mean probability"),
    # ppo
    "ppo.epsilon": (0.2, "clip range (ratio cutoff 1 + epsilon)"),
    "ppo.c1": (0.5, "value-loss coefficient"),
    "ppo.c2": (0.01, "entropy-bonus coefficient"),
    "ppo.gamma": (0.99, "discount factor"),
    "ppo.lambda": (0.95, "GAE decay"),
    "ppo.exemplars_K": (10, "exemplars retrieved per episode"),
    "ppo.batch_size": (128, "minibatch size"),
    "ppo.epochs": (4, "optimization passes per collected buffer"),
    "ppo.lr": (3e-5, "learning rate"),
    "ppo.scheduler": ("plateau", "plateau | none"),
    "ppo.grad_clip": (1.0, "global gradient-norm clip (0 disables)"),
    "ppo.normalize_advantages": (True, "per-batch advantage normalization"),
    "ppo.plateau_patience": (10, "iterations without improvement before decay"),
    "ppo.plateau_factor": (0.5, "learning-rate decay factor"),
    "ppo.min_lr": (1e-7, "learning-rate floor"),
    # replay
    "replay.capacity": (2048, "replay buffer capacity"),
    "replay.max_age": (4, "drop experience older than this many rounds"),
    "replay.min_fill": (128, "minimum buffered transitions before optimizing"),
    # training loop
    "train.total_episodes": (2000, "episodes to train for"),
    "train.episodes_per_iter": (16, "episodes collected per iteration"),
    "train.checkpoint_interval": (10, "iterations between checkpoints"),
    # evaluation
    "eval.repeats": (1, "inference runs to average over"),
    "eval.k_max": (3, "report EM@1..k_max"),
    "eval.smatch_restarts": (12, "random restarts in the SMatch hill-climb"),
    "eval.smatch_macro": (False, "macro-average SMatch instead of micro"),
}


def _coerce(key: str, raw, default):
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return str(raw)


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    """Resolved configuration: every key has a value, unknown keys rejected."""

    def __init__(self, values: dict | None = None):
        self._values = {key: default for key, (default, _) in DEFAULTS.items()}
        for key, val in (values or {}).items():
            self.set(key, val)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        self._values[key] = _coerce(key, value, DEFAULTS[key][0])

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        return self._values[key]

    def get(self, key: str):
        return self[key]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        config = cls()
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
                key, _, raw = stripped.partition("=")
                config.set(key.strip(), _parse_value(raw))
        for key, val in (overrides or {}).items():
            config.set(key, _parse_value(val) if isinstance(val, str) else val)
        return config

    def resolved_text(self) -> str:
        lines = []
        for key in sorted(self._values):
            lines.append(f"{key} = {json.dumps(self._values[key])}")
        return "\n".join(lines) + "\n"

    def echo(self) -> dict:
        return dict(self._values)

    def ppo(self) -> PpoConfig:
        return PpoConfig(
            epsilon=self["ppo.epsilon"],
            c1=self["ppo.c1"],
            c2=self["ppo.c2"],
            gamma=self["ppo.gamma"],
            gae_lambda=self["ppo.lambda"],
            exemplars_per_episode=self["ppo.exemplars_K"],
            minibatch_size=self["ppo.batch_size"],
            epochs_per_buffer=self["ppo.epochs"],
            learning_rate=self["ppo.lr"],
            scheduler=self["ppo.scheduler"],
            buffer_size=self["policy.buffer_B"],
            k_candidates=self["policy.k_candidates"],
            strata=self["policy.strata_Ns"],
            beta_renorm=self["policy.beta_renorm"],
            replay_capacity=self["replay.capacity"],
            replay_max_age=self["replay.max_age"],
            min_fill=self["replay.min_fill"],
            normalize_advantages=self["ppo.normalize_advantages"],
            grad_clip=self["ppo.grad_clip"],
            plateau_patience=self["ppo.plateau_patience"],
            plateau_factor=self["ppo.plateau_factor"],
            min_learning_rate=self["ppo.min_lr"],
            episodes_per_iteration=self["train.episodes_per_iter"],
            checkpoint_interval=self["train.checkpoint_interval"],
            length_normalize=self["reward.length_normalize"],
        )
