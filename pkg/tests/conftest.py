from __future__ import annotations

import numpy as np
import pytest

from retloop.store import Exemplar, ExemplarStore


class ToyEncoder:
    """Fixed-dimension encoder returning seeded pseudo-random unit vectors."""

    def __init__(self, dim: int = 4, seed: int = 0):
        self.dim = dim
        self._seed = seed

    def embed(self, text: str) -> np.ndarray:
        rng = np.random.default_rng([self._seed, abs(hash(text)) % (2**32)])
        vec = rng.normal(size=self.dim)
        return vec / np.linalg.norm(vec)


def make_store(embeddings, texts=None) -> ExemplarStore:
    embeddings = np.asarray(embeddings, dtype=float)
    n = embeddings.shape[0]
    exemplars = [
        Exemplar(i, texts[i][0] if texts else f"input {i}", texts[i][1] if texts else f"(f{i})")
        for i in range(n)
    ]
    return ExemplarStore(exemplars, embeddings)


def orthogonal_store(dim: int) -> ExemplarStore:
    """dim exemplars whose embeddings are the standard basis vectors."""
    return make_store(np.eye(dim))


def random_store(n: int, dim: int, seed: int = 0) -> ExemplarStore:
    rng = np.random.default_rng(seed)
    return make_store(rng.normal(size=(n, dim)))


@pytest.fixture
def toy_encoder():
    return ToyEncoder()
