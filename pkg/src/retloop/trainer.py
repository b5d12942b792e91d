"""Experience collection, replay, GAE, the clipped PPO objective, and the
optimization loop.

Per-step gradients are exact reverse-mode: each transition is replayed from
the trainable initial state through the GRU chain that produced it, so the
policy term, value term, and entropy bonus all backpropagate into the GRU,
the query projection, the value head, and s0.
"""
from __future__ import annotations

import csv
import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .environment import LmEnvironment, reward
from .errors import ConfigError, EnvProtocolError, TrainingAborted, TrainingError, TransportError
from .model import RetrieverModel, load_model, save_model, snap_f32
from .policy import log_prob_and_entropy, renormalize, sample_action, stratified_policy, mips_top, query_vector
from .recurrent import gru_backward, gru_step, value
from .store import ExemplarStore

log = logging.getLogger("retloop.trainer")


@dataclass
class PpoConfig:
    """Clipping, loss coefficients, GAE discounts, and loop sizes."""

    epsilon: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    gamma: float = 0.99
    gae_lambda: float = 0.95
    exemplars_per_episode: int = 10
    minibatch_size: int = 128
    epochs_per_buffer: int = 4
    learning_rate: float = 3e-5
    scheduler: str = "plateau"
    # stratified sampling
    buffer_size: int = 768
    k_candidates: int = 8
    strata: int = 4
    beta_renorm: float = 5.0
    # replay
    replay_capacity: int = 2048
    replay_max_age: int = 4
    min_fill: int = 128
    # stability
    normalize_advantages: bool = True
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_learning_rate: float = 1e-7
    # loop
    episodes_per_iteration: int = 16
    checkpoint_interval: int = 10
    length_normalize: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"clip epsilon must be in (0, 1), got {self.epsilon}")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.gae_lambda <= 1.0:
            raise ConfigError("gamma and lambda must be in (0, 1]")
        if self.c1 < 0 or self.c2 < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if self.exemplars_per_episode < 1:
            raise ConfigError("need at least one exemplar per episode")


@dataclass
class TransitionRecord:
    """One step of experience, self-contained for shuffled replay.

    `prefix_ids` and `query_embedding` let the optimizer rebuild the state
    under the current parameters; `candidate_ids`/`candidate_raw` freeze the
    truncated policy support the behavior probability was computed on.
    """

    episode_id: int
    step: int
    state: np.ndarray
    query_embedding: np.ndarray
    prefix_ids: tuple[int, ...]
    candidate_ids: np.ndarray
    candidate_raw: np.ndarray
    action_id: int
    behavior_prob: float
    reward: float
    value_estimate: float
    advantage: float = 0.0
    return_to_go: float = 0.0
    age: int = 0


class ReplayBuffer:
    """Bounded FIFO of transitions; eviction is strictly oldest-first.

    Appends are lock-protected so parallel rollout workers can share one
    buffer; the optimizer is the single consumer.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._records: deque[TransitionRecord] = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def append(self, record: TransitionRecord) -> None:
        with self._lock:
            self._records.append(record)

    def extend(self, records) -> None:
        with self._lock:
            self._records.extend(records)

    def drop_older_than(self, current_round: int, max_age: int) -> None:
        with self._lock:
            kept = [r for r in self._records if current_round - r.age <= max_age]
            self._records = deque(kept, maxlen=self.capacity)

    def snapshot(self) -> list[TransitionRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates by backward recursion, terminal V = 0."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape or rewards.ndim != 1 or len(rewards) < 1:
        raise ValueError(
            f"rewards and values must be equal-length vectors, got "
            f"{rewards.shape} and {values.shape}"
        )
    horizon = len(rewards)
    advantages = np.zeros(horizon)
    next_value = 0.0
    running = 0.0
    for i in reversed(range(horizon)):
        delta = rewards[i] + gamma * next_value - values[i]
        running = delta + gamma * lam * running
        advantages[i] = running
        next_value = values[i]
    return advantages


def _returns_to_go(rewards, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in reversed(range(len(rewards))):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


@dataclass
class RolloutResult:
    records: list[TransitionRecord]
    total_return: float
    mean_entropy: float


def rollout(
    model: RetrieverModel,
    store: ExemplarStore,
    env: LmEnvironment,
    query: str,
    reference: str,
    query_embedding: np.ndarray,
    cfg: PpoConfig,
    rng: np.random.Generator,
    episode_id: int = 0,
    greedy: bool = False,
) -> RolloutResult:
    """Run one K-step episode; previously chosen ids are excluded at later steps.

    Greedy mode keeps the deterministic top-k candidate set and takes its
    argmax (used for validation); sampling mode draws from the stratified
    truncated policy. Raises on environment failure so the caller can discard
    the episode without partial storage.
    """
    steps = cfg.exemplars_per_episode
    if len(store) < steps:
        raise ValueError(f"store of {len(store)} cannot supply {steps} distinct exemplars")

    state, _ = gru_step(model.gru, model.init.s0, query_embedding)
    chosen: list[int] = []
    records: list[TransitionRecord] = []
    entropies: list[float] = []
    for step in range(steps):
        avail = len(store) - len(chosen)
        if greedy:
            top = mips_top(store, query_vector(model.policy, state),
                           min(cfg.k_candidates, avail), chosen)
            ids = np.array([i for i, _ in top], dtype=int)
            raw = np.array([s for _, s in top], dtype=float) / model.policy.beta
            probs = renormalize(raw, cfg.beta_renorm)
            action = int(ids[0])
            behavior_prob = float(probs[0])
            entropies.append(float(-(probs * np.log(probs)).sum()))
            candidate_ids, candidate_raw = ids, raw
        else:
            tp = stratified_policy(
                model.policy, state, store, chosen,
                min(cfg.buffer_size, avail), cfg.k_candidates, cfg.strata,
                cfg.beta_renorm, rng,
            )
            action, behavior_prob = sample_action(tp, rng)
            entropies.append(log_prob_and_entropy(tp, action)[1])
            candidate_ids, candidate_raw = tp.ids, tp.raw_scores

        step_reward = reward(
            env, query, reference,
            [store[j] for j in chosen], store[action],
            length_normalize=cfg.length_normalize,
        )
        records.append(
            TransitionRecord(
                episode_id=episode_id,
                step=step,
                state=state.copy(),
                query_embedding=np.asarray(query_embedding, dtype=float).copy(),
                prefix_ids=tuple(chosen),
                candidate_ids=np.asarray(candidate_ids, dtype=int).copy(),
                candidate_raw=np.asarray(candidate_raw, dtype=float).copy(),
                action_id=action,
                behavior_prob=behavior_prob,
                reward=step_reward,
                value_estimate=value(model.value, state),
            )
        )
        chosen.append(action)
        state, _ = gru_step(model.gru, state, store.embeddings[action])

    rewards = [r.reward for r in records]
    values = [r.value_estimate for r in records]
    advantages = gae(rewards, values, cfg.gamma, cfg.gae_lambda)
    rtg = _returns_to_go(rewards, cfg.gamma)
    for rec, adv, ret in zip(records, advantages, rtg):
        rec.advantage = float(adv)
        rec.return_to_go = float(ret)
    return RolloutResult(records, float(sum(rewards)), float(np.mean(entropies)))


@dataclass
class PpoLossResult:
    loss: float
    grads: dict[str, np.ndarray]
    loss_policy: float
    loss_value: float
    entropy: float


def ppo_loss(
    batch: list[TransitionRecord],
    model: RetrieverModel,
    store: ExemplarStore,
    cfg: PpoConfig,
) -> PpoLossResult:
    """Mean clipped-surrogate loss with value and entropy terms, plus exact grads.

    For each record the episode prefix is replayed through the current GRU to
    rebuild the state, the policy is recomputed over the record's stored k
    candidates, and the ratio uses the stored behavior probability.
    """
    if not batch:
        raise ValueError("ppo_loss requires a non-empty batch")
    n = len(batch)
    advantages = np.array([r.advantage for r in batch])
    if cfg.normalize_advantages:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    grads = model.zero_grads()
    gru_grad_names = [f"gru.{name}" for name, _ in model.gru.named()]
    temp = model.policy.beta * cfg.beta_renorm
    total_policy = total_value = total_entropy = 0.0

    for rec, adv in zip(batch, advantages):
        if np.any(rec.candidate_ids >= len(store)) or rec.action_id >= len(store):
            raise TrainingError(
                f"episode {rec.episode_id} step {rec.step}: stored ids exceed store size"
            )
        where = np.nonzero(rec.candidate_ids == rec.action_id)[0]
        if len(where) == 0:
            raise TrainingError(
                f"episode {rec.episode_id} step {rec.step}: action "
                f"{rec.action_id} absent from stored candidates"
            )
        a_pos = int(where[0])

        # replay the state under current parameters, keeping tapes
        inputs = [rec.query_embedding] + [store.embeddings[j] for j in rec.prefix_ids]
        state = model.init.s0
        tapes = []
        for vec in inputs:
            state, tape = gru_step(model.gru, state, vec)
            tapes.append(tape)

        cand_emb = store.embeddings[rec.candidate_ids]
        query = model.policy.wq @ state + model.policy.bq
        logits = (cand_emb @ query) / temp
        shifted = logits - logits.max()
        exp = np.exp(shifted)
        probs = exp / exp.sum()
        pi_new = probs[a_pos]

        ratio = pi_new / rec.behavior_prob
        unclipped = ratio * adv
        clipped = float(np.clip(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon)) * adv
        total_policy += -min(unclipped, clipped)

        v_est = float(model.value.v @ state)
        v_err = v_est - rec.return_to_go
        total_value += v_err * v_err

        entropy = float(-(probs * np.log(probs)).sum())
        total_entropy += entropy

        # backward: d(loss_record)/d(probs) via the three loss terms
        dprobs = np.zeros_like(probs)
        if unclipped <= clipped:  # unclipped branch active; else gradient is exactly 0
            dprobs[a_pos] += -adv / rec.behavior_prob
        dprobs += -cfg.c2 * (-(np.log(probs) + 1.0))
        # softmax jacobian: dL/dz = p * (dL/dp - p . dL/dp)
        dlogits = probs * (dprobs - float(probs @ dprobs))
        dquery = (cand_emb.T @ dlogits) / temp
        grads["policy.wq"] += np.outer(dquery, state)
        grads["policy.bq"] += dquery
        dstate = model.policy.wq.T @ dquery

        dv = 2.0 * cfg.c1 * v_err
        grads["value.v"] += dv * state
        dstate = dstate + dv * model.value.v

        upstream = dstate
        for tape in reversed(tapes):
            gru_grads, upstream, _ = gru_backward(tape, upstream)
            for gname, garr in zip(gru_grad_names, (a for _, a in gru_grads.named())):
                grads[gname] += garr
        grads["init.s0"] += upstream

    for name in grads:
        grads[name] /= n

    loss = (total_policy + cfg.c1 * total_value - cfg.c2 * total_entropy) / n
    return PpoLossResult(
        loss=float(loss),
        grads=grads,
        loss_policy=total_policy / n,
        loss_value=total_value / n,
        entropy=total_entropy / n,
    )


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm of at most `max_norm`."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class Adam:
    """Adaptive-moment optimizer over named parameter arrays (in-place updates)."""

    def __init__(self, model: RetrieverModel, cfg: PpoConfig):
        self.beta1 = cfg.adam_beta1
        self.beta2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in model.named_arrays()}
        self.v = {name: np.zeros_like(arr) for name, arr in model.named_arrays()}

    def step(self, model: RetrieverModel, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, arr in model.named_arrays():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            arr -= lr * (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)


# --- training loop -----------------------------------------------------------

METRICS_COLUMNS = ("iteration", "episodes", "mean_return", "mean_entropy",
                   "loss_policy", "loss_value", "lr")


@dataclass
class TrainResult:
    rows: list[dict]
    checkpoints: list[Path]
    model: RetrieverModel
    episode_returns: list[float]


def _format_row(row: dict) -> list[str]:
    out = []
    for col in METRICS_COLUMNS:
        val = row[col]
        out.append(str(val) if isinstance(val, int) else f"{val:.10g}")
    return out


def _buffer_arrays(records: list[TransitionRecord], k: int, steps: int):
    """Pack replay records into named arrays for checkpointing."""
    n = len(records)
    dim = records[0].state.shape[0] if n else 0
    prefix = -np.ones((n, steps), dtype=int)
    for i, r in enumerate(records):
        prefix[i, : len(r.prefix_ids)] = r.prefix_ids
    def fvec(attr):
        return np.array([getattr(r, attr) for r in records], dtype=float)
    def ivec(attr):
        return np.array([getattr(r, attr) for r in records], dtype=int)
    return [
        ("buf.state", np.stack([r.state for r in records]) if n else np.zeros((0, dim))),
        ("buf.query_embedding", np.stack([r.query_embedding for r in records]) if n else np.zeros((0, dim))),
        ("buf.prefix_ids", prefix),
        ("buf.candidate_ids", np.stack([r.candidate_ids for r in records]) if n else np.zeros((0, k), dtype=int)),
        ("buf.candidate_raw", np.stack([r.candidate_raw for r in records]) if n else np.zeros((0, k))),
        ("buf.episode_id", ivec("episode_id")), ("buf.step", ivec("step")),
        ("buf.action_id", ivec("action_id")), ("buf.age", ivec("age")),
        ("buf.behavior_prob", fvec("behavior_prob")), ("buf.reward", fvec("reward")),
        ("buf.value_estimate", fvec("value_estimate")), ("buf.advantage", fvec("advantage")),
        ("buf.return_to_go", fvec("return_to_go")),
    ]


def _records_from_arrays(arrays: dict[str, np.ndarray]) -> list[TransitionRecord]:
    if "buf.state" not in arrays:
        return []
    n = arrays["buf.state"].shape[0]
    out = []
    for i in range(n):
        prefix = tuple(int(j) for j in arrays["buf.prefix_ids"][i] if j >= 0)
        out.append(
            TransitionRecord(
                episode_id=int(arrays["buf.episode_id"][i]),
                step=int(arrays["buf.step"][i]),
                state=arrays["buf.state"][i].copy(),
                query_embedding=arrays["buf.query_embedding"][i].copy(),
                prefix_ids=prefix,
                candidate_ids=arrays["buf.candidate_ids"][i].copy(),
                candidate_raw=arrays["buf.candidate_raw"][i].copy(),
                action_id=int(arrays["buf.action_id"][i]),
                behavior_prob=float(arrays["buf.behavior_prob"][i]),
                reward=float(arrays["buf.reward"][i]),
                value_estimate=float(arrays["buf.value_estimate"][i]),
                advantage=float(arrays["buf.advantage"][i]),
                return_to_go=float(arrays["buf.return_to_go"][i]),
                age=int(arrays["buf.age"][i]),
            )
        )
    return out


def _snap_record(rec: TransitionRecord) -> TransitionRecord:
    f32 = lambda x: float(np.float32(x))
    return replace(
        rec,
        state=snap_f32(rec.state),
        query_embedding=snap_f32(rec.query_embedding),
        candidate_raw=snap_f32(rec.candidate_raw),
        behavior_prob=f32(rec.behavior_prob),
        reward=f32(rec.reward),
        value_estimate=f32(rec.value_estimate),
        advantage=f32(rec.advantage),
        return_to_go=f32(rec.return_to_go),
    )


class Trainer:
    """Owns the optimization loop: collect rollouts, replay minibatches,
    schedule the learning rate, checkpoint, and log metrics."""

    def __init__(
        self,
        model: RetrieverModel,
        store: ExemplarStore,
        env: LmEnvironment,
        embedder,
        train_pairs: list[tuple[str, str]],
        cfg: PpoConfig,
        seed: int = 0,
        run_dir=None,
        dev_pairs: list[tuple[str, str]] | None = None,
        config_echo: dict | None = None,
    ):
        if not train_pairs:
            raise ConfigError("no training queries")
        self.model = model
        self.store = store
        self.env = env
        self.embedder = embedder
        self.train_pairs = train_pairs
        self.dev_pairs = dev_pairs or []
        self.cfg = cfg
        self.seed = seed
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.config_echo = config_echo or {}
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.optimizer = Adam(model, cfg)
        self.iteration = 0
        self.episodes_done = 0
        self.lr = cfg.learning_rate
        self.plateau_best = -np.inf
        self.plateau_bad = 0
        self._embedding_cache: dict[str, np.ndarray] = {}

    # -- plumbing

    def _embed(self, text: str) -> np.ndarray:
        if text not in self._embedding_cache:
            self._embedding_cache[text] = np.asarray(self.embedder.embed(text), dtype=float)
        return self._embedding_cache[text]

    def _metrics_path(self) -> Path:
        return self.run_dir / "metrics.csv"

    def _write_row(self, row: dict) -> None:
        if self.run_dir is None:
            return
        path = self._metrics_path()
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(METRICS_COLUMNS)
            writer.writerow(_format_row(row))

    def checkpoint_path(self, iteration: int) -> Path:
        return self.run_dir / "checkpoints" / f"ckpt_{iteration:06d}.bin"

    def save_checkpoint(self) -> Path:
        """Write a resumable checkpoint.

        Parameters, optimizer moments, and buffered experience are rounded to
        float32 in memory first, so a resumed run continues from exactly the
        values the file holds.
        """
        for _, arr in self.model.named_arrays():
            arr[...] = snap_f32(arr)
        for table in (self.optimizer.m, self.optimizer.v):
            for name in table:
                table[name] = snap_f32(table[name])
        records = [_snap_record(r) for r in self.buffer.snapshot()]
        self.buffer = ReplayBuffer(self.cfg.replay_capacity)
        self.buffer.extend(records)

        extra = [(f"adam.m.{n}", a) for n, a in self.optimizer.m.items()]
        extra += [(f"adam.v.{n}", a) for n, a in self.optimizer.v.items()]
        extra += _buffer_arrays(records, self.cfg.k_candidates, self.cfg.exemplars_per_episode)
        meta = {
            "iteration": self.iteration,
            "episodes_done": self.episodes_done,
            "adam_t": self.optimizer.t,
            "lr": self.lr,
            "plateau_best": None if np.isneginf(self.plateau_best) else self.plateau_best,
            "plateau_bad": self.plateau_bad,
            "config": self.config_echo,
        }
        path = self.checkpoint_path(self.iteration)
        save_model(path, self.model, meta=meta, extra_arrays=extra)
        return path

    @classmethod
    def resume(cls, checkpoint_path, store, env, embedder, train_pairs, cfg,
               seed=0, run_dir=None, dev_pairs=None, config_echo=None) -> "Trainer":
        model, meta, extras = load_model(checkpoint_path)
        trainer = cls(model, store, env, embedder, train_pairs, cfg, seed=seed,
                      run_dir=run_dir, dev_pairs=dev_pairs, config_echo=config_echo)
        trainer.iteration = int(meta["iteration"]) + 1
        trainer.episodes_done = int(meta["episodes_done"])
        trainer.lr = float(meta["lr"])
        trainer.plateau_best = -np.inf if meta.get("plateau_best") is None else float(meta["plateau_best"])
        trainer.plateau_bad = int(meta.get("plateau_bad", 0))
        trainer.optimizer.t = int(meta["adam_t"])
        for name in trainer.optimizer.m:
            trainer.optimizer.m[name] = extras[f"adam.m.{name}"]
            trainer.optimizer.v[name] = extras[f"adam.v.{name}"]
        trainer.buffer.extend(_records_from_arrays(extras))
        return trainer

    # -- core loop

    def _collect(self, target_episodes: int) -> tuple[list[float], list[float]]:
        returns, entropies = [], []
        it_rng = np.random.default_rng([self.seed, self.iteration, 0x01])
        for slot in range(self.cfg.episodes_per_iteration):
            if self.episodes_done >= target_episodes:
                break
            query, reference = self.train_pairs[int(it_rng.integers(len(self.train_pairs)))]
            ep_rng = np.random.default_rng([self.seed, self.iteration, 0x02, slot])
            try:
                result = rollout(
                    self.model, self.store, self.env, query, reference,
                    self._embed(query), self.cfg, ep_rng, episode_id=self.episodes_done,
                )
            except (TransportError, EnvProtocolError) as exc:
                log.warning("episode discarded after environment failure: %s", exc)
                continue
            for rec in result.records:
                rec.age = self.iteration
            self.buffer.extend(result.records)
            self.episodes_done += 1
            returns.append(result.total_return)
            entropies.append(result.mean_entropy)
        return returns, entropies

    def _optimize(self) -> tuple[float, float]:
        data = self.buffer.snapshot()
        opt_rng = np.random.default_rng([self.seed, self.iteration, 0x03])
        policy_losses, value_losses = [], []
        for _ in range(self.cfg.epochs_per_buffer):
            order = opt_rng.permutation(len(data))
            for start in range(0, len(data), self.cfg.minibatch_size):
                batch = [data[i] for i in order[start : start + self.cfg.minibatch_size]]
                result = ppo_loss(batch, self.model, self.store, self.cfg)
                finite = np.isfinite(result.loss) and all(
                    np.all(np.isfinite(g)) for g in result.grads.values()
                )
                if not finite:
                    self._dump_diagnostics(batch, result)
                    raise TrainingAborted(
                        f"non-finite loss/gradient at iteration {self.iteration}"
                    )
                clip_gradients(result.grads, self.cfg.grad_clip)
                self.optimizer.step(self.model, result.grads, self.lr)
                policy_losses.append(result.loss_policy)
                value_losses.append(result.loss_value)
        return float(np.mean(policy_losses)), float(np.mean(value_losses))

    def _dump_diagnostics(self, batch, result) -> None:
        if self.run_dir is None:
            return
        out = self.run_dir / "diagnostics"
        out.mkdir(parents=True, exist_ok=True)
        arrays = {f"rec{i}_{k}": v for i, rec in enumerate(batch)
                  for k, v in (("state", rec.state), ("raw", rec.candidate_raw))}
        np.savez(out / f"minibatch_iter{self.iteration}.npz", **arrays)
        summary = {
            "iteration": self.iteration,
            "loss": result.loss,
            "records": [
                {
                    "episode_id": r.episode_id, "step": r.step, "action_id": r.action_id,
                    "behavior_prob": r.behavior_prob, "reward": r.reward,
                    "advantage": r.advantage, "return_to_go": r.return_to_go,
                }
                for r in batch
            ],
        }
        (out / f"minibatch_iter{self.iteration}.json").write_text(
            json.dumps(summary, indent=2)
        )

    def _validation_return(self) -> float | None:
        if not self.dev_pairs:
            return None
        rng = np.random.default_rng([self.seed, self.iteration, 0x04])
        total = 0.0
        subset = self.dev_pairs[: min(len(self.dev_pairs), 16)]
        for query, reference in subset:
            result = rollout(self.model, self.store, self.env, query, reference,
                             self._embed(query), self.cfg, rng, greedy=True)
            total += result.total_return
        return total / len(subset)

    def _schedule(self, metric: float) -> None:
        if self.cfg.scheduler != "plateau" or not np.isfinite(metric):
            return
        if metric > self.plateau_best + 1e-9:
            self.plateau_best = metric
            self.plateau_bad = 0
        else:
            self.plateau_bad += 1
            if self.plateau_bad >= self.cfg.plateau_patience:
                self.lr = max(self.lr * self.cfg.plateau_factor, self.cfg.min_learning_rate)
                self.plateau_bad = 0

    def run(self, total_episodes: int) -> TrainResult:
        rows: list[dict] = []
        checkpoints: list[Path] = []
        episode_returns: list[float] = []
        while self.episodes_done < total_episodes:
            returns, entropies = self._collect(total_episodes)
            episode_returns.extend(returns)
            self.buffer.drop_older_than(self.iteration, self.cfg.replay_max_age)

            if len(self.buffer) >= self.cfg.min_fill:
                loss_policy, loss_value = self._optimize()
            else:
                log.info(
                    "iteration %d: replay fill %d below minimum %d, skipping optimization",
                    self.iteration, len(self.buffer), self.cfg.min_fill,
                )
                loss_policy = loss_value = float("nan")

            mean_return = float(np.mean(returns)) if returns else float("nan")
            dev_return = self._validation_return()
            self._schedule(mean_return if dev_return is None else dev_return)
            row = {
                "iteration": self.iteration,
                "episodes": self.episodes_done,
                "mean_return": mean_return,
                "mean_entropy": float(np.mean(entropies)) if entropies else float("nan"),
                "loss_policy": loss_policy,
                "loss_value": loss_value,
                "lr": self.lr,
            }
            rows.append(row)
            self._write_row(row)
            if self.run_dir is not None and (
                self.iteration % self.cfg.checkpoint_interval == 0
                or self.episodes_done >= total_episodes
            ):
                checkpoints.append(self.save_checkpoint())
            self.iteration += 1
        if self.run_dir is not None and not checkpoints:
            checkpoints.append(self.save_checkpoint())
        return TrainResult(rows, checkpoints, self.model, episode_returns)
