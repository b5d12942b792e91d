from __future__ import annotations

import math

import numpy as np
import pytest

from retloop.recurrent import (
    GruParams,
    InitialState,
    ValueHead,
    gru_backward,
    gru_step,
    init_state,
    value,
)


def _scalar_gru_oracle(p: GruParams, h, x):
    """Independent reference: plain-python loops over the gate equations."""
    d = len(h)
    sig = lambda t: 1.0 / (1.0 + math.exp(-t))
    out = []
    z = [sig(sum(p.wz[i][j] * x[j] for j in range(d)) + sum(p.uz[i][j] * h[j] for j in range(d)) + p.bz[i]) for i in range(d)]
    r = [sig(sum(p.wr[i][j] * x[j] for j in range(d)) + sum(p.ur[i][j] * h[j] for j in range(d)) + p.br[i]) for i in range(d)]
    for i in range(d):
        pre = sum(p.wh[i][j] * x[j] for j in range(d))
        pre += sum(p.uh[i][j] * r[j] * h[j] for j in range(d))
        pre += p.bh[i]
        h_tilde = math.tanh(pre)
        out.append((1.0 - z[i]) * h[i] + z[i] * h_tilde)
    return np.array(out)


def _random_params(d, rng, bias_scale=0.3):
    p = GruParams.random(d, rng)
    for _, arr in p.named():
        if arr.ndim == 1:
            arr += rng.normal(size=arr.shape) * bias_scale
    return p


def test_zero_params_halve_state():
    d = 5
    p = GruParams.zeros(d)
    h = np.arange(1.0, d + 1.0)
    out, _ = gru_step(p, h, np.zeros(d))
    np.testing.assert_allclose(out, 0.5 * h)


def test_zero_state_zero_weights_fixed_point():
    d = 3
    p = GruParams.zeros(d)
    out, _ = gru_step(p, np.zeros(d), np.ones(d))
    np.testing.assert_array_equal(out, np.zeros(d))


def test_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        p = _random_params(3, rng)
        h, x = rng.normal(size=3), rng.normal(size=3)
        out, _ = gru_step(p, h, x)
        np.testing.assert_allclose(out, _scalar_gru_oracle(p, h, x), atol=1e-12)


def test_forward_is_deterministic_bitwise():
    rng = np.random.default_rng(5)
    p = _random_params(4, rng)
    h, x = rng.normal(size=4), rng.normal(size=4)
    a, _ = gru_step(p, h, x)
    b, _ = gru_step(p, h, x)
    assert a.tobytes() == b.tobytes()


def test_output_in_convex_hull():
    rng = np.random.default_rng(6)
    for _ in range(50):
        p = _random_params(4, rng, bias_scale=1.0)
        h, x = rng.normal(size=4) * 3.0, rng.normal(size=4) * 3.0
        out, _ = gru_step(p, h, x)
        assert np.all(np.abs(out) <= np.maximum(np.abs(h), 1.0) + 1e-12)


def test_dimension_mismatch_raises():
    p = GruParams.zeros(3)
    with pytest.raises(ValueError):
        gru_step(p, np.zeros(2), np.zeros(3))


# --- backward ----------------------------------------------------------------


def test_backward_zero_upstream_gives_zeros():
    rng = np.random.default_rng(7)
    p = _random_params(3, rng)
    _, tape = gru_step(p, rng.normal(size=3), rng.normal(size=3))
    grads, gh, gx = gru_backward(tape, np.zeros(3))
    for _, arr in grads.named():
        np.testing.assert_array_equal(arr, np.zeros_like(arr))
    np.testing.assert_array_equal(gh, np.zeros(3))
    np.testing.assert_array_equal(gx, np.zeros(3))


def test_backward_is_linear_in_upstream():
    rng = np.random.default_rng(8)
    p = _random_params(3, rng)
    _, tape = gru_step(p, rng.normal(size=3), rng.normal(size=3))
    g1, g2 = rng.normal(size=3), rng.normal(size=3)
    a_grads, a_h, a_x = gru_backward(tape, g1)
    b_grads, b_h, b_x = gru_backward(tape, g2)
    s_grads, s_h, s_x = gru_backward(tape, g1 + g2)
    for (_, a), (_, b), (_, s) in zip(a_grads.named(), b_grads.named(), s_grads.named()):
        np.testing.assert_allclose(a + b, s, atol=1e-12)
    np.testing.assert_allclose(a_h + b_h, s_h, atol=1e-12)
    np.testing.assert_allclose(a_x + b_x, s_x, atol=1e-12)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    d = 3
    p = _random_params(d, rng)
    h, x = rng.normal(size=d), rng.normal(size=d)
    upstream = rng.normal(size=d)

    def loss():
        out, _ = gru_step(p, h, x)
        return float(upstream @ out)

    _, tape = gru_step(p, h, x)
    grads, gh, gx = gru_backward(tape, upstream)
    eps = 1e-5
    for name, arr in p.named():
        analytic = dict(grads.named())[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            lp = loss()
            arr[idx] = old - eps
            lm = loss()
            arr[idx] = old
            fd = (lp - lm) / (2 * eps)
            assert abs(analytic[idx] - fd) <= max(1e-4 * max(abs(analytic[idx]), abs(fd)), 1e-8)
    for vec, analytic in ((h, gh), (x, gx)):
        for i in range(d):
            old = vec[i]
            vec[i] = old + eps
            lp = loss()
            vec[i] = old - eps
            lm = loss()
            vec[i] = old
            fd = (lp - lm) / (2 * eps)
            assert abs(analytic[i] - fd) <= max(1e-4 * max(abs(analytic[i]), abs(fd)), 1e-8)


# --- value head and initial state ---------------------------------------------


def test_value_zero_head():
    assert value(ValueHead(np.zeros(4)), np.ones(4)) == 0.0


def test_value_coordinate_projection():
    head = ValueHead(np.array([1.0, 0.0, 0.0]))
    assert value(head, np.array([3.5, -1.0, 2.0])) == 3.5


def test_value_matches_summation_oracle():
    rng = np.random.default_rng(10)
    for _ in range(20):
        v, s = rng.normal(size=6), rng.normal(size=6)
        expect = sum(v[i] * s[i] for i in range(6))
        assert abs(value(ValueHead(v), s) - expect) < 1e-12


def test_init_state_zero_gru_halves_s0():
    d = 4
    s0 = np.arange(1.0, d + 1.0)
    out = init_state(InitialState(s0), np.ones(d) * 9.0, GruParams.zeros(d))
    np.testing.assert_allclose(out, 0.5 * s0)


def test_init_state_distinguishes_queries_and_is_deterministic():
    rng = np.random.default_rng(11)
    d = 4
    gru = _random_params(d, rng)
    init = InitialState(rng.normal(size=d))
    q1, q2 = rng.normal(size=d), rng.normal(size=d)
    a, b = init_state(init, q1, gru), init_state(init, q2, gru)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, init_state(init, q1, gru))
    # agreement with the scalar oracle on the same composition
    np.testing.assert_allclose(a, _scalar_gru_oracle(gru, init.s0, q1), atol=1e-12)
