from __future__ import annotations

import numpy as np
import pytest

from conftest import make_store, orthogonal_store, random_store
from retloop.errors import ConfigError
from retloop.policy import (
    PolicyParams,
    TruncatedPolicy,
    greedy_step,
    log_prob_and_entropy,
    query_vector,
    renormalize,
    sample_action,
    stratified_policy,
    stratum_sizes,
)


def _identity_params(d, beta=1.0):
    return PolicyParams(np.eye(d), np.zeros(d), beta)


# --- query projection ----------------------------------------------------------


def test_query_vector_identity():
    s = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(query_vector(_identity_params(3), s), s)


def test_query_vector_constant_map():
    b = np.array([4.0, 5.0])
    params = PolicyParams(np.zeros((2, 2)), b)
    for s in (np.zeros(2), np.array([7.0, -1.0])):
        np.testing.assert_array_equal(query_vector(params, s), b)


def test_query_vector_matches_double_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        w, b, s = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4)
        got = query_vector(PolicyParams(w, b), s)
        expect = [sum(w[i][j] * s[j] for j in range(4)) + b[i] for i in range(4)]
        np.testing.assert_allclose(got, expect, atol=1e-12)


def test_query_vector_dim_mismatch():
    with pytest.raises(ValueError):
        query_vector(_identity_params(3), np.zeros(2))


# --- greedy step ----------------------------------------------------------------


def test_greedy_step_self_similarity():
    store = orthogonal_store(8)
    state = store.embeddings[5]
    assert greedy_step(_identity_params(8), state, store)[0] == 5


def test_greedy_step_respects_exclusion():
    store = make_store([[1.0, 0.0], [0.8, 0.0], [0.0, 1.0]])
    params = _identity_params(2)
    state = np.array([1.0, 0.0])
    assert greedy_step(params, state, store, exclude={0})[0] == 1


def test_greedy_step_matches_brute_force():
    store = random_store(100, 6, seed=2)
    params = PolicyParams(np.random.default_rng(3).normal(size=(6, 6)), np.zeros(6))
    rng = np.random.default_rng(4)
    for _ in range(20):
        state = rng.normal(size=6)
        q = params.wq @ state
        dots = store.embeddings @ q
        expect = min(range(100), key=lambda i: (-dots[i], i))
        assert greedy_step(params, state, store)[0] == expect


def test_greedy_step_all_excluded():
    store = orthogonal_store(2)
    with pytest.raises(ValueError):
        greedy_step(_identity_params(2), np.ones(2), store, exclude={0, 1})


def test_greedy_argmax_is_scale_invariant():
    store = random_store(60, 4, seed=8)
    rng = np.random.default_rng(9)
    state = rng.normal(size=4)
    w = rng.normal(size=(4, 4))
    base = greedy_step(PolicyParams(w, np.zeros(4), beta=1.0), state, store)[0]
    for c in (0.1, 3.0, 42.0):
        scaled = greedy_step(PolicyParams(c * w, np.zeros(4), beta=1.0), state, store)[0]
        by_beta = greedy_step(PolicyParams(w, np.zeros(4), beta=c), state, store)[0]
        assert scaled == base
        assert by_beta == base


# --- stratified construction ------------------------------------------------------


def test_stratum_sizes_remainder_goes_to_earlier():
    assert stratum_sizes(766, 3) == [256, 255, 255]
    assert stratum_sizes(9, 4) == [3, 2, 2, 2]
    assert stratum_sizes(8, 4) == [2, 2, 2, 2]


def test_stratified_buffer_arithmetic_768():
    store = random_store(800, 8, seed=5)
    params = _identity_params(8)
    rng = np.random.default_rng(6)
    state = rng.normal(size=8)
    # buffer rank of each id under the same scoring
    from retloop.store import mips_top

    ranked = [i for i, _ in mips_top(store, query_vector(params, state), 768)]
    rank_of = {exemplar_id: pos for pos, exemplar_id in enumerate(ranked)}
    for _ in range(25):
        tp = stratified_policy(params, state, store, set(), 768, 8, 4, 5.0, rng)
        ranks = sorted(rank_of[int(i)] for i in tp.ids)
        assert ranks[0] == 0 and ranks[1] == 1  # top k/Ns kept deterministically
        assert sum(1 for r in ranks if 2 <= r < 258) == 2  # stratum of 256
        assert sum(1 for r in ranks if 258 <= r < 513) == 2  # stratum of 255
        assert sum(1 for r in ranks if 513 <= r < 768) == 2  # stratum of 255
        assert len(tp) == 8


def test_stratified_equal_scores_give_uniform_probs():
    store = make_store(np.tile(np.array([1.0, 0.0]), (12, 1)))
    rng = np.random.default_rng(7)
    tp = stratified_policy(_identity_params(2), np.array([1.0, 0.0]), store,
                           set(), 12, 4, 2, 5.0, rng)
    np.testing.assert_allclose(tp.probs, np.full(4, 0.25), atol=1e-12)
    tp2 = stratified_policy(_identity_params(2), np.array([1.0, 0.0]), store,
                            set(), 12, 4, 2, 0.01, rng)
    np.testing.assert_allclose(tp2.probs, np.full(4, 0.25), atol=1e-12)


def test_stratified_always_contains_global_top():
    store = random_store(64, 4, seed=10)
    params = _identity_params(4)
    rng = np.random.default_rng(11)
    from retloop.store import mips_top

    for _ in range(30):
        state = rng.normal(size=4)
        top2 = {i for i, _ in mips_top(store, query_vector(params, state), 2)}
        tp = stratified_policy(params, state, store, set(), 60, 8, 4, 5.0, rng)
        assert top2.issubset(set(int(i) for i in tp.ids))
        assert len(set(tp.ids.tolist())) == 8


def test_stratified_matches_greedy_when_buffer_is_whole_store():
    store = random_store(40, 4, seed=12)
    params = _identity_params(4)
    rng = np.random.default_rng(13)
    for _ in range(10):
        state = rng.normal(size=4)
        tp = stratified_policy(params, state, store, set(), 40, 8, 4, 5.0, rng)
        greedy_id = greedy_step(params, state, store)[0]
        assert int(tp.ids[np.argmax(tp.raw_scores)]) == greedy_id


def test_stratified_precondition_errors():
    store = random_store(20, 4, seed=14)
    params = _identity_params(4)
    rng = np.random.default_rng(15)
    state = np.zeros(4)
    with pytest.raises(ConfigError):
        stratified_policy(params, state, store, set(), 16, 8, 1, 5.0, rng)  # Ns < 2
    with pytest.raises(ConfigError):
        stratified_policy(params, state, store, set(), 16, 8, 3, 5.0, rng)  # Ns does not divide k
    with pytest.raises(ConfigError):
        stratified_policy(params, state, store, set(), 4, 8, 4, 5.0, rng)  # B < k
    with pytest.raises(ConfigError):
        stratified_policy(params, state, store, set(range(15)), 16, 8, 4, 5.0, rng)  # B > avail


def test_renormalize_shift_invariance():
    rng = np.random.default_rng(16)
    raw = rng.normal(size=8)
    for shift in (-100.0, 3.7, 250.0):
        np.testing.assert_allclose(
            renormalize(raw, 5.0), renormalize(raw + shift, 5.0), atol=1e-12
        )


# --- sampling and log-probs --------------------------------------------------------


def test_sample_action_degenerate():
    tp = TruncatedPolicy(np.array([42]), np.array([1.0]), np.array([0.0]))
    action, prob = sample_action(tp, np.random.default_rng(0))
    assert (action, prob) == (42, 1.0)


def test_sample_action_two_point_concentration():
    tp = TruncatedPolicy(np.array([3, 9]), np.array([0.5, 0.5]), np.zeros(2))
    rng = np.random.default_rng(123)
    draws = [sample_action(tp, rng)[0] for _ in range(10_000)]
    freq = draws.count(3) / 10_000
    assert 0.47 <= freq <= 0.53


def test_sample_action_prob_bookkeeping():
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    tp = TruncatedPolicy(np.array([5, 6, 7, 8]), probs, np.zeros(4))
    rng = np.random.default_rng(1)
    for _ in range(50):
        action, prob = sample_action(tp, rng)
        assert prob == probs[action - 5]


def test_log_prob_and_entropy_uniform():
    tp = TruncatedPolicy(np.arange(4), np.full(4, 0.25), np.zeros(4))
    log_p, entropy = log_prob_and_entropy(tp, 2)
    assert log_p == pytest.approx(-np.log(4.0), abs=1e-12)
    assert entropy == pytest.approx(np.log(4.0), abs=1e-12)


def test_entropy_deterministic_limit():
    eps = 1e-9
    probs = np.array([1.0 - eps, eps / 2.0, eps / 2.0])
    tp = TruncatedPolicy(np.arange(3), probs, np.zeros(3))
    _, entropy = log_prob_and_entropy(tp, 0)
    assert entropy < 1e-6


def test_entropy_matches_direct_summation():
    rng = np.random.default_rng(17)
    for _ in range(20):
        raw = rng.normal(size=6)
        probs = renormalize(raw, 2.0)
        tp = TruncatedPolicy(np.arange(6), probs, raw)
        _, entropy = log_prob_and_entropy(tp, 3)
        expect = -sum(float(p) * float(np.log(p)) for p in probs)
        assert abs(entropy - expect) < 1e-10


def test_log_prob_absent_id_raises():
    tp = TruncatedPolicy(np.array([1, 2]), np.array([0.5, 0.5]), np.zeros(2))
    with pytest.raises(ValueError):
        log_prob_and_entropy(tp, 99)


def test_truncated_policy_validation():
    with pytest.raises(ValueError):
        TruncatedPolicy(np.array([1, 1]), np.array([0.5, 0.5]), np.zeros(2))
    with pytest.raises(ValueError):
        TruncatedPolicy(np.array([1, 2]), np.array([0.9, 0.2]), np.zeros(2))
    with pytest.raises(ValueError):
        TruncatedPolicy(np.array([], dtype=int), np.array([]), np.array([]))
