"""Bundled retriever parameters, inference trajectories, and checkpoint files."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .policy import PolicyParams, greedy_step, query_vector, sample_action, stratified_policy
from .recurrent import GruParams, InitialState, ValueHead, gru_step
from .store import ExemplarStore

CHECKPOINT_MAGIC = b"RLC1"
CHECKPOINT_VERSION = 1


@dataclass
class RetrieverModel:
    """All trainable parameters: GRU transition, query projection, value head, s0."""

    gru: GruParams
    policy: PolicyParams
    value: ValueHead
    init: InitialState

    @property
    def dim(self) -> int:
        return self.policy.dim

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"gru.{name}", arr) for name, arr in self.gru.named()]
        out += [
            ("policy.wq", self.policy.wq),
            ("policy.bq", self.policy.bq),
            ("value.v", self.value.v),
            ("init.s0", self.init.s0),
        ]
        return out

    def copy(self) -> "RetrieverModel":
        return RetrieverModel(
            gru=self.gru.copy(),
            policy=PolicyParams(self.policy.wq.copy(), self.policy.bq.copy(), self.policy.beta),
            value=ValueHead(self.value.v.copy()),
            init=InitialState(self.init.s0.copy()),
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.named_arrays()}


def init_random(dim: int, rng: np.random.Generator, beta: float = 1.0) -> RetrieverModel:
    """Default initialization: uniform(-1/sqrt(d), 1/sqrt(d)) matrices, zero vectors."""
    scale = 1.0 / np.sqrt(dim)
    return RetrieverModel(
        gru=GruParams.random(dim, rng),
        policy=PolicyParams(rng.uniform(-scale, scale, size=(dim, dim)), np.zeros(dim), beta),
        value=ValueHead.zeros(dim),
        init=InitialState.zeros(dim),
    )


def init_identity(dim: int, beta: float = 1.0) -> RetrieverModel:
    """Diagnostic initialization whose first greedy step reproduces raw similarity search.

    The update gate is biased open and the candidate map is a small multiple
    of the identity, so the first state is a monotone, nearly proportional
    image of the query embedding and the step-1 argmax matches plain MIPS.
    """
    gru = GruParams.zeros(dim)
    gru.bz += 4.0
    gru.wh += 0.05 * np.eye(dim)
    return RetrieverModel(
        gru=gru,
        policy=PolicyParams(np.eye(dim), np.zeros(dim), beta),
        value=ValueHead.zeros(dim),
        init=InitialState.zeros(dim),
    )


def build_model(dim: int, kind: str, seed: int, beta: float = 1.0) -> RetrieverModel:
    if kind == "random":
        return init_random(dim, np.random.default_rng([seed, 0x1717]), beta=beta)
    if kind == "identity":
        return init_identity(dim, beta=beta)
    raise ConfigError(f"unknown init.kind: {kind!r}")


def iterative_trajectory(
    model: RetrieverModel,
    store: ExemplarStore,
    query_embedding: np.ndarray,
    steps: int,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    buffer_size: int = 768,
    k_candidates: int = 8,
    strata: int = 4,
    beta_renorm: float = 5.0,
) -> list[tuple[int, float]]:
    """Run the retriever for `steps` retrievals, excluding previous picks.

    Greedy mode takes the exact argmax at every step; sampled mode draws from
    the stratified truncated policy and requires an rng.
    """
    if steps > len(store):
        raise ValueError(f"cannot retrieve {steps} exemplars from a store of {len(store)}")
    if mode not in ("greedy", "sampled"):
        raise ConfigError(f"unknown retrieval mode: {mode!r}")
    if mode == "sampled" and rng is None:
        raise ConfigError("sampled mode requires an rng")

    state, _ = gru_step(model.gru, model.init.s0, query_embedding)
    chosen: list[tuple[int, float]] = []
    exclude: set[int] = set()
    for _ in range(steps):
        if mode == "greedy":
            action, score = greedy_step(model.policy, state, store, exclude)
        else:
            avail = len(store) - len(exclude)
            tp = stratified_policy(
                model.policy,
                state,
                store,
                exclude,
                min(buffer_size, avail),
                k_candidates,
                strata,
                beta_renorm,
                rng,
            )
            action, _ = sample_action(tp, rng)
            score = float(query_vector(model.policy, state) @ store.embeddings[action])
        chosen.append((action, score))
        exclude.add(action)
        state, _ = gru_step(model.gru, state, store.embeddings[action])
    return chosen


# --- checkpoint container --------------------------------------------------
#
# Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON header
# {format_version, dim, arrays: [{name, shape, dtype}], meta}, then the raw
# array bytes concatenated in header order. Float arrays are stored as
# little-endian IEEE-754 float32; integer bookkeeping arrays as int32.


def snap_f32(arr: np.ndarray) -> np.ndarray:
    """Round to float32 precision (kept as float64); used before serialization."""
    return arr.astype(np.float32).astype(np.float64)


def save_arrays(path, arrays: list[tuple[str, np.ndarray]], dim: int, meta: dict) -> None:
    entries = []
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            data, dtype = arr.astype("<f4"), "<f4"
        elif np.issubdtype(arr.dtype, np.integer):
            data, dtype = arr.astype("<i4"), "<i4"
        else:
            raise ConfigError(f"cannot serialize array {name} of dtype {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(data.tobytes())
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "dim": dim, "arrays": entries, "meta": meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict, int]:
    """Read a checkpoint container; returns (arrays by name, meta, dim)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported format version {header['format_version']}")
    offset = 8 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        dtype = np.dtype(entry["dtype"])
        nbytes = count * dtype.itemsize
        block = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(shape)
        offset += nbytes
        if dtype.kind == "f":
            arrays[entry["name"]] = block.astype(np.float64)
        else:
            arrays[entry["name"]] = block.astype(np.int64)
    return arrays, header["meta"], int(header["dim"])


def save_model(path, model: RetrieverModel, meta: dict | None = None,
               extra_arrays: list[tuple[str, np.ndarray]] | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("beta", model.policy.beta)
    save_arrays(path, model.named_arrays() + list(extra_arrays or []), model.dim, meta)


def load_model(path) -> tuple[RetrieverModel, dict, dict[str, np.ndarray]]:
    """Load a checkpoint; returns (model, meta, any extra arrays)."""
    arrays, meta, dim = load_arrays(path)
    names = {
        "gru.wz", "gru.uz", "gru.bz", "gru.wr", "gru.ur", "gru.br",
        "gru.wh", "gru.uh", "gru.bh", "policy.wq", "policy.bq", "value.v", "init.s0",
    }
    missing = names - set(arrays)
    if missing:
        raise ConfigError(f"{path}: missing parameter arrays {sorted(missing)}")
    model = RetrieverModel(
        gru=GruParams(*(arrays[f"gru.{n}"] for n in ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"))),
        policy=PolicyParams(arrays["policy.wq"], arrays["policy.bq"], float(meta.get("beta", 1.0))),
        value=ValueHead(arrays["value.v"]),
        init=InitialState(arrays["init.s0"]),
    )
    extras = {k: v for k, v in arrays.items() if k not in names}
    return model, meta, extras
