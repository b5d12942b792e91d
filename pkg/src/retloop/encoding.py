"""Text embedders: a deterministic hashing embedder and a remote-service client.

The embedder is frozen: it is queried during ingestion, rollouts and
evaluation but never receives gradients.
"""
from __future__ import annotations

import hashlib
import time
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import ConfigError, TransportError


@runtime_checkable
class Embedder(Protocol):
    """Deterministic text encoder: the same text always maps to the same vector."""

    dim: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Feature-hashed bag of character trigrams, L2-normalized.

    A pure function of (text, seed, dim): no weights, no state, safe to call
    from any number of threads. Text with fewer than three characters has no
    trigrams and maps to the zero vector.
    """

    def __init__(self, dim: int = 64, seed: int = 13):
        if dim < 1:
            raise ConfigError(f"embedder dim must be positive, got {dim}")
        self.dim = dim
        self.seed = seed
        self._key = (int(seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        low = text.lower()
        for i in range(len(low) - 2):
            gram = low[i : i + 3].encode("utf-8")
            digest = hashlib.blake2b(gram, digest_size=8, key=self._key).digest()
            vec[int.from_bytes(digest, "little") % self.dim] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
        return vec

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if texts else np.zeros((0, self.dim))


def _requests_post(url: str, payload: dict, timeout: float) -> dict:
    import requests

    resp = requests.post(url, json=payload, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


class RemoteEmbedder:
    """Client for a JSON embedding service.

    Protocol: POST {"texts": [...]} to the endpoint, response
    {"vectors": [[...], ...]} with one vector of length `dim` per text.
    Transient transport failures are retried; after `max_attempts` failures a
    TransportError carrying the attempt count is raised. Instances keep no
    mutable state, so one client may serve concurrent rollout workers.
    """

    def __init__(
        self,
        endpoint: str,
        dim: int,
        timeout_s: float = 30.0,
        max_attempts: int = 3,
        retry_wait_s: float = 0.5,
        post=_requests_post,
    ):
        if not endpoint:
            raise ConfigError("remote embedder requires a non-empty endpoint")
        self.endpoint = endpoint
        self.dim = dim
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.retry_wait_s = retry_wait_s
        self._post = post

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        body = self._request({"texts": list(texts)})
        vectors = body.get("vectors") if isinstance(body, dict) else None
        if vectors is None or len(vectors) != len(texts):
            raise ConfigError(
                f"embedding service returned {0 if vectors is None else len(vectors)} "
                f"vectors for {len(texts)} texts"
            )
        out = np.asarray(vectors, dtype=float)
        if out.ndim != 2 or out.shape[1] != self.dim:
            raise ConfigError(
                f"embedding service dimension {out.shape[-1] if out.ndim == 2 else '?'} "
                f"does not match configured dim {self.dim}"
            )
        if not np.all(np.isfinite(out)):
            raise ConfigError("embedding service returned non-finite values")
        return out

    def _request(self, payload: dict) -> dict:
        last_error = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                return self._post(self.endpoint, payload, self.timeout_s)
            except (OSError, ValueError) as exc:
                last_error = exc
                if attempt < self.max_attempts:
                    time.sleep(self.retry_wait_s)
        raise TransportError(
            f"embedding request to {self.endpoint} failed: {last_error}",
            attempts=self.max_attempts,
        )


def build_embedder(config) -> Embedder:
    """Construct the embedder selected by `encoder.kind`."""
    kind = config["encoder.kind"]
    if kind == "hashing":
        return HashingEmbedder(dim=config["encoder.dim"], seed=config["encoder.seed"])
    if kind == "remote":
        return RemoteEmbedder(
            endpoint=config["encoder.endpoint"],
            dim=config["encoder.dim"],
            timeout_s=config["encoder.timeout_s"],
        )
    raise ConfigError(f"unknown encoder.kind: {kind!r}")
