"""Plain LSTM recurrence shared by every particle."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import ShapeError, Tensor, broadcast_to, concat, sigmoid, tanh


@dataclass
class LstmParams:
    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_C: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_C: Tensor

    def __post_init__(self):
        shape = self.W_f.shape
        if len(shape) != 2 or shape[1] <= shape[0]:
            raise ShapeError(f"LSTM weight must be m x (m+n) with n >= 1, got {shape}")
        for w in (self.W_i, self.W_o, self.W_C):
            if w.shape != shape:
                raise ShapeError(f"LSTM weights disagree: {shape} vs {w.shape}")
        for b in (self.b_f, self.b_i, self.b_o, self.b_C):
            if b.shape != (shape[0],):
                raise ShapeError(f"LSTM bias must have length {shape[0]}, got {b.shape}")

    @property
    def m(self) -> int:
        return self.W_f.shape[0]

    @property
    def n(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


def init_lstm(m: int, n: int, seed) -> LstmParams:
    """Uniform weights in +-1/sqrt(m+n); zero biases except a forget bias of one."""
    if m < 1 or n < 1:
        raise ValueError(f"init_lstm: m and n must be >= 1, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(m + n)

    def w():
        return Tensor(rng.uniform(-bound, bound, size=(m, m + n)), requires_grad=True)

    return LstmParams(
        W_f=w(), W_i=w(), W_o=w(), W_C=w(),
        b_f=Tensor(np.ones(m), requires_grad=True),
        b_i=Tensor(np.zeros(m), requires_grad=True),
        b_o=Tensor(np.zeros(m), requires_grad=True),
        b_C=Tensor(np.zeros(m), requires_grad=True),
    )


def lstm_gates(params: LstmParams, h_prev: Tensor, c_prev: Tensor, x_t: Tensor):
    """Return ``(o_t, c_t, z)`` where ``z = [h_prev; x_t]``.

    Leading axes of ``h_prev``/``c_prev``/``x_t`` are batch axes and must
    broadcast against each other.
    """
    m, n = params.m, params.n
    if h_prev.shape[-1] != m or c_prev.shape[-1] != m:
        raise ShapeError(f"lstm_step: state size must be {m}, got h {h_prev.shape}, c {c_prev.shape}")
    if x_t.shape[-1] != n:
        raise ShapeError(f"lstm_step: input size must be {n}, got {x_t.shape}")
    if x_t.shape[:-1] != h_prev.shape[:-1]:
        lead = np.broadcast_shapes(x_t.shape[:-1], h_prev.shape[:-1])
        x_t = broadcast_to(x_t, lead + (n,))
        h_prev = broadcast_to(h_prev, lead + (m,))
    z = concat([h_prev, x_t], axis=-1)
    f = sigmoid(z @ params.W_f.T + params.b_f)
    i = sigmoid(z @ params.W_i.T + params.b_i)
    o = sigmoid(z @ params.W_o.T + params.b_o)
    c_tilde = tanh(z @ params.W_C.T + params.b_C)
    c = f * c_prev + i * c_tilde
    return o, c, z


def lstm_step(params: LstmParams, h_prev: Tensor, c_prev: Tensor, x_t: Tensor) -> tuple[Tensor, Tensor]:
    o, c, _ = lstm_gates(params, h_prev, c_prev, x_t)
    return o * tanh(c), c
