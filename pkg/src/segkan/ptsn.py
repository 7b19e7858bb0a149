"""Position-time series gated cell, its sequence runner and an LSTM baseline.

Cells accept either a single step ``x_t`` of shape ``[input]`` with state
``[hidden]``, or a batch ``[B, input]`` with state ``[B, hidden]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffengine as de
from .diffengine import Array


@dataclass
class PtsnState:
    h: Array
    c: Array

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "PtsnState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(de.zeros(shape), de.zeros(shape))


@dataclass
class PtsnParams:
    W_g: Array
    b_g: Array
    W_h: Array
    b_h: Array

    @property
    def hidden(self) -> int:
        return self.W_g.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_g.shape[1] - self.W_g.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator) -> "PtsnParams":
        fan_in = input_dim + hidden
        bound = 1.0 / np.sqrt(fan_in)
        w = lambda: Array(rng.uniform(-bound, bound, (hidden, fan_in)), requires_grad=True)
        return cls(w(), de.zeros(hidden, requires_grad=True), w(), de.zeros(hidden, requires_grad=True))

    def parameters(self) -> dict:
        return {"W_g": self.W_g, "b_g": self.b_g, "W_h": self.W_h, "b_h": self.b_h}


@dataclass
class LstmParams:
    W: Array  # [4*hidden, input+hidden], gate blocks ordered i, f, g, o
    b: Array  # [4*hidden]

    @property
    def hidden(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator,
             forget_bias: float = 1.0) -> "LstmParams":
        fan_in = input_dim + hidden
        bound = 1.0 / np.sqrt(fan_in)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        return cls(Array(rng.uniform(-bound, bound, (4 * hidden, fan_in)), requires_grad=True),
                   Array(b, requires_grad=True))

    def parameters(self) -> dict:
        return {"W": self.W, "b": self.b}


def _check_step(x_t: Array, state: PtsnState, input_dim: int, hidden: int) -> None:
    batched = x_t.ndim == 2
    want_x = (x_t.shape[0], input_dim) if batched else (input_dim,)
    want_s = (x_t.shape[0], hidden) if batched else (hidden,)
    if x_t.shape != want_x or state.h.shape != want_s or state.c.shape != want_s:
        raise de.ShapeError(
            f"cell shapes x={x_t.shape} h={state.h.shape} c={state.c.shape} "
            f"do not match input={input_dim} hidden={hidden}")


def affine(v: Array, W: Array, b: Array) -> Array:
    """W v + b for a vector ``v`` or for each row of a matrix ``v``."""
    if v.ndim == 1:
        return de.add(de.reshape(de.matmul(W, de.reshape(v, (-1, 1))), (W.shape[0],)), b)
    out = de.matmul(v, de.transpose(W))
    return de.add(out, de.expand(b, out.shape))


def ptsn_cell(x_t: Array, state: PtsnState, params: PtsnParams) -> PtsnState:
    """One gated step.

    G = sigmoid(W_g [x; h] + b_g), H = tanh(W_h [x; h] + b_h)
    hid = h * G + (1 - G) * H
    c = hid * c_prev + G * H
    h = hid * tanh(c)
    """
    x_t = de.as_array(x_t)
    _check_step(x_t, state, params.input_dim, params.hidden)
    xh = de.concat([x_t, state.h], axis=-1)
    G = de.sigmoid(affine(xh, params.W_g, params.b_g))
    H = de.tanh(affine(xh, params.W_h, params.b_h))
    hid = de.add(de.mul(state.h, G), de.mul(de.sub(1.0, G), H))
    c = de.add(de.mul(hid, state.c), de.mul(G, H))
    h = de.mul(hid, de.tanh(c))
    return PtsnState(h, c)


def lstm_cell(x_t: Array, state: PtsnState, params: LstmParams) -> PtsnState:
    x_t = de.as_array(x_t)
    n = params.hidden
    _check_step(x_t, state, params.input_dim, n)
    z = affine(de.concat([x_t, state.h], axis=-1), params.W, params.b)
    gate = lambda k: z[..., k * n:(k + 1) * n]
    i, f = de.sigmoid(gate(0)), de.sigmoid(gate(1))
    g, o = de.tanh(gate(2)), de.sigmoid(gate(3))
    c = de.add(de.mul(f, state.c), de.mul(i, g))
    h = de.mul(o, de.tanh(c))
    return PtsnState(h, c)


def run_sequence(cell: Callable, xs: Sequence[Array], params, init: PtsnState | None = None):
    """Left fold of ``cell`` over ``xs``; returns (hidden per step, final state)."""
    if len(xs) == 0:
        raise ValueError("sequence must be non-empty")
    if init is None:
        batch = xs[0].shape[0] if xs[0].ndim == 2 else None
        init = PtsnState.zeros(params.hidden, batch)
    state = init
    hs = []
    for x_t in xs:
        state = cell(x_t, state, params)
        hs.append(state.h)
    return hs, state


def ptsn_sequence(xs: Sequence[Array], params: PtsnParams,
                  init: PtsnState | None = None) -> list:
    return run_sequence(ptsn_cell, xs, params, init)[0]


def lstm_sequence(xs: Sequence[Array], params: LstmParams,
                  init: PtsnState | None = None) -> list:
    return run_sequence(lstm_cell, xs, params, init)[0]
