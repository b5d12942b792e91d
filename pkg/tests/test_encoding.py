from __future__ import annotations

import numpy as np
import pytest

from retloop.encoding import HashingEmbedder, RemoteEmbedder, build_embedder
from retloop.errors import ConfigError, TransportError


def test_empty_text_is_zero_vector():
    emb = HashingEmbedder(dim=16)
    np.testing.assert_array_equal(emb.embed(""), np.zeros(16))


def test_text_without_trigrams_is_zero_vector():
    emb = HashingEmbedder(dim=16)
    np.testing.assert_array_equal(emb.embed("ab"), np.zeros(16))


def test_embedding_is_deterministic():
    emb = HashingEmbedder(dim=32, seed=5)
    a = emb.embed("schedule a meeting")
    b = emb.embed("schedule a meeting")
    np.testing.assert_array_equal(a, b)
    # pure function of (text, seed, dim): a fresh instance agrees
    np.testing.assert_array_equal(HashingEmbedder(dim=32, seed=5).embed("schedule a meeting"), a)


def test_different_seeds_differ():
    text = "schedule a meeting"
    a = HashingEmbedder(dim=32, seed=1).embed(text)
    b = HashingEmbedder(dim=32, seed=2).embed(text)
    assert not np.array_equal(a, b)


def test_unit_norm():
    emb = HashingEmbedder(dim=64)
    assert abs(np.linalg.norm(emb.embed("schedule a meeting")) - 1.0) < 1e-9


def test_locality_shared_trigrams_raise_cosine():
    """Texts sharing a long phrase should be closer than unrelated texts."""
    emb = HashingEmbedder(dim=64)
    rng = np.random.default_rng(0)
    letters = "abcdefghijklmnopqrstuvwxyz"
    shared_sims, disjoint_sims = [], []
    for _ in range(40):
        base = "".join(rng.choice(list(letters), size=20))
        suffix_a = "".join(rng.choice(list(letters), size=6))
        suffix_b = "".join(rng.choice(list(letters), size=6))
        other = "".join(rng.choice(list(letters.upper()), size=26))
        va, vb = emb.embed(base + suffix_a), emb.embed(base + suffix_b)
        vo = emb.embed(other.lower()[::-1] + "0123456789")
        shared_sims.append(float(va @ vb))
        disjoint_sims.append(float(va @ vo))
    assert np.mean(shared_sims) > np.mean(disjoint_sims) + 0.2


def test_invalid_dim_rejected():
    with pytest.raises(ConfigError):
        HashingEmbedder(dim=0)


# --- remote client -----------------------------------------------------------


def _ok_post(vectors):
    def post(url, payload, timeout):
        assert "texts" in payload
        return {"vectors": vectors[: len(payload["texts"])]}

    return post


def test_remote_embedder_parses_vectors():
    post = _ok_post([[1.0, 0.0], [0.0, 1.0]])
    emb = RemoteEmbedder("http://svc/embed", dim=2, post=post)
    out = emb.embed_batch(["a", "b"])
    np.testing.assert_array_equal(out, np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(emb.embed("a"), np.array([1.0, 0.0]))


def test_remote_embedder_dim_mismatch():
    emb = RemoteEmbedder("http://svc/embed", dim=3, post=_ok_post([[1.0, 0.0]]))
    with pytest.raises(ConfigError):
        emb.embed("a")


def test_remote_embedder_retries_then_fails_with_attempt_count():
    calls = []

    def post(url, payload, timeout):
        calls.append(1)
        raise OSError("connection refused")

    emb = RemoteEmbedder("http://svc/embed", dim=2, post=post, retry_wait_s=0.0)
    with pytest.raises(TransportError) as excinfo:
        emb.embed("a")
    assert excinfo.value.attempts == 3
    assert len(calls) == 3


def test_remote_embedder_recovers_after_transient_failure():
    state = {"count": 0}

    def post(url, payload, timeout):
        state["count"] += 1
        if state["count"] == 1:
            raise OSError("flap")
        return {"vectors": [[0.5, 0.5]]}

    emb = RemoteEmbedder("http://svc/embed", dim=2, post=post, retry_wait_s=0.0)
    np.testing.assert_array_equal(emb.embed("a"), np.array([0.5, 0.5]))
    assert state["count"] == 2


def test_build_embedder_from_config():
    from retloop.config import RunConfig

    config = RunConfig({"encoder.kind": "hashing", "encoder.dim": 16})
    emb = build_embedder(config)
    assert emb.dim == 16
    with pytest.raises(ConfigError):
        build_embedder(RunConfig({"encoder.kind": "nope"}))
