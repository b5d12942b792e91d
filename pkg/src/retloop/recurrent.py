"""Recurrent state transition with exact reverse-mode gradients.

The state tracker is a single GRU cell over vectors in R^d, plus a trainable
initial state and a linear value head. Gradients are computed analytically
from a tape of forward activations; nothing in the training path is
numerically differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GruParams:
    """Update gate (wz, uz, bz), reset gate (wr, ur, br), candidate (wh, uh, bh)."""

    wz: np.ndarray
    uz: np.ndarray
    bz: np.ndarray
    wr: np.ndarray
    ur: np.ndarray
    br: np.ndarray
    wh: np.ndarray
    uh: np.ndarray
    bh: np.ndarray

    @property
    def dim(self) -> int:
        return self.bz.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "GruParams":
        m = lambda: np.zeros((dim, dim))
        v = lambda: np.zeros(dim)
        return cls(m(), m(), v(), m(), m(), v(), m(), m(), v())

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator) -> "GruParams":
        scale = 1.0 / np.sqrt(dim)
        m = lambda: rng.uniform(-scale, scale, size=(dim, dim))
        v = lambda: np.zeros(dim)
        return cls(m(), m(), v(), m(), m(), v(), m(), m(), v())

    def named(self):
        for name in ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"):
            yield name, getattr(self, name)

    def zeros_like(self) -> "GruParams":
        return GruParams(*(np.zeros_like(a) for _, a in self.named()))

    def copy(self) -> "GruParams":
        return GruParams(*(a.copy() for _, a in self.named()))


@dataclass
class GruTape:
    """Forward activations needed for the backward pass.

    Replaying `params` on (h, x) reproduces the recorded h_next bit-exactly.
    """

    params: GruParams
    h: np.ndarray
    x: np.ndarray
    z: np.ndarray
    r: np.ndarray
    rh: np.ndarray
    h_tilde: np.ndarray


def gru_step(params: GruParams, h: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, GruTape]:
    """One GRU update: h_next = (1 - z) * h + z * h_tilde."""
    h = np.asarray(h, dtype=float)
    x = np.asarray(x, dtype=float)
    d = params.dim
    if h.shape != (d,) or x.shape != (d,):
        raise ValueError(f"expected vectors of dim {d}, got h {h.shape}, x {x.shape}")
    z = sigmoid(params.wz @ x + params.uz @ h + params.bz)
    r = sigmoid(params.wr @ x + params.ur @ h + params.br)
    rh = r * h
    h_tilde = np.tanh(params.wh @ x + params.uh @ rh + params.bh)
    h_next = (1.0 - z) * h + z * h_tilde
    return h_next, GruTape(params, h, x, z, r, rh, h_tilde)


def gru_backward(tape: GruTape, grad_h_next: np.ndarray) -> tuple[GruParams, np.ndarray, np.ndarray]:
    """Exact gradients of a scalar loss through h_next.

    Returns (parameter gradients, gradient w.r.t. h, gradient w.r.t. x).
    Gradients from repeated calls add, so accumulated calls on the same tape
    equal a single call with the summed upstream gradient.
    """
    g = np.asarray(grad_h_next, dtype=float)
    p, h, x, z, r, rh, h_tilde = (
        tape.params,
        tape.h,
        tape.x,
        tape.z,
        tape.r,
        tape.rh,
        tape.h_tilde,
    )
    if g.shape != h.shape:
        raise ValueError(f"upstream gradient shape {g.shape} does not match state {h.shape}")

    grads = p.zeros_like()
    # h_next = (1 - z) * h + z * h_tilde
    dz_pre = g * (h_tilde - h) * z * (1.0 - z)
    dh_tilde_pre = g * z * (1.0 - h_tilde * h_tilde)
    drh = p.uh.T @ dh_tilde_pre
    dr_pre = drh * h * r * (1.0 - r)

    grads.wz += np.outer(dz_pre, x)
    grads.uz += np.outer(dz_pre, h)
    grads.bz += dz_pre
    grads.wr += np.outer(dr_pre, x)
    grads.ur += np.outer(dr_pre, h)
    grads.br += dr_pre
    grads.wh += np.outer(dh_tilde_pre, x)
    grads.uh += np.outer(dh_tilde_pre, rh)
    grads.bh += dh_tilde_pre

    grad_h = g * (1.0 - z) + drh * r + p.uz.T @ dz_pre + p.ur.T @ dr_pre
    grad_x = p.wz.T @ dz_pre + p.wr.T @ dr_pre + p.wh.T @ dh_tilde_pre
    return grads, grad_h, grad_x


@dataclass
class ValueHead:
    """Linear state-value function V(s) = v . s."""

    v: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "ValueHead":
        return cls(np.zeros(dim))


def value(head: ValueHead, state: np.ndarray) -> float:
    state = np.asarray(state, dtype=float)
    if state.shape != head.v.shape:
        raise ValueError(f"state shape {state.shape} does not match head {head.v.shape}")
    return float(head.v @ state)


@dataclass
class InitialState:
    """Trainable start-of-episode state."""

    s0: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "InitialState":
        return cls(np.zeros(dim))


def init_state(init: InitialState, query_embedding: np.ndarray, gru: GruParams) -> np.ndarray:
    """State for the first retrieval: one GRU step consuming the query embedding.

    Feeding the query through the transition makes step one query-conditioned
    while keeping a single transition mechanism.
    """
    state, _ = gru_step(gru, init.s0, query_embedding)
    return state
