"""Dual-stage attention encoder-decoder with optional CPF-LSTM sub-layers.

The encoder weighs the driving series with input attention computed from
the mean encoder state; the decoder attends over the per-step encoder means
and consumes the target history.  Either sub-layer can carry a particle
ensemble.  Particles are projected for continuous resampling through the
matching block of the output map, so the sort direction is the one the
prediction is most sensitive to.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tn
from .cpf import CpfLstmLayer
from .rnn import Forward
from .tensor import ShapeError, Tensor

MODES = {
    "darnn": (False, False),
    "cpf-enc": (True, False),
    "cpf-dec": (False, True),
    "cpf-darnn": (True, True),
}


@dataclass
class AttentionParams:
    v_e: Tensor  # (T,)
    W_e: Tensor  # (T, 2m)
    U_e: Tensor  # (T, T)
    v_d: Tensor  # (m,)
    W_d: Tensor  # (m, 2p)
    U_d: Tensor  # (m, m)
    w_tilde: Tensor  # (m + 1,)
    b_tilde: Tensor  # ()
    W_y: Tensor  # (p, p + m)
    v_y: Tensor  # (p,)
    b_w: Tensor  # (p,)
    b_v: Tensor  # ()

    @property
    def T(self) -> int:
        return self.v_e.shape[0]

    @property
    def m(self) -> int:
        return self.v_d.shape[0]

    @property
    def p(self) -> int:
        return self.v_y.shape[0]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def init(cls, T: int, m: int, p: int, seed) -> AttentionParams:
        rng = np.random.default_rng(seed)

        def u(*shape):
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        return cls(
            v_e=u(T), W_e=u(T, 2 * m), U_e=u(T, T),
            v_d=u(m), W_d=u(m, 2 * p), U_d=u(m, m),
            w_tilde=u(m + 1), b_tilde=Tensor(0.0, requires_grad=True),
            W_y=u(p, p + m), v_y=u(p), b_w=Tensor(np.zeros(p), requires_grad=True),
            b_v=Tensor(0.0, requires_grad=True),
        )

    @classmethod
    def zeros(cls, T: int, m: int, p: int) -> AttentionParams:
        z = lambda *s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
        return cls(v_e=z(T), W_e=z(T, 2 * m), U_e=z(T, T), v_d=z(m), W_d=z(m, 2 * p), U_d=z(m, m),
                   w_tilde=z(m + 1), b_tilde=z(), W_y=z(p, p + m), v_y=z(p), b_w=z(p), b_v=z())


def input_attention(x_window, h_prev: Tensor, s_prev: Tensor, params: AttentionParams,
                    ux: Tensor | None = None) -> Tensor:
    """Softmax weights over the ``n`` driving series.

    ``x_window`` is ``(..., n, T)``; ``ux`` may carry the precomputed
    ``x_window @ U_e.T``, which does not change across steps.
    """
    x = tn._as_tensor(x_window)
    if x.shape[-1] != params.T:
        raise ShapeError(f"input_attention: window length {x.shape[-1]} != {params.T}")
    if ux is None:
        ux = x @ params.U_e.T
    q = tn.concat([h_prev, s_prev], axis=-1) @ params.W_e.T
    q = tn.reshape(q, q.shape[:-1] + (1, q.shape[-1]))
    e = tn.tanh(q + ux) @ params.v_e
    return tn.softmax(e, axis=-1)


def temporal_attention(h_bars: Tensor, d_prev: Tensor, s_prev: Tensor, params: AttentionParams,
                       uh: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Weights ``beta`` over the encoder means ``(..., T, m)`` and the context vector."""
    if uh is None:
        uh = h_bars @ params.U_d.T
    q = tn.concat([d_prev, s_prev], axis=-1) @ params.W_d.T
    q = tn.reshape(q, q.shape[:-1] + (1, q.shape[-1]))
    scores = tn.tanh(q + uh) @ params.v_d
    beta = tn.softmax(scores, axis=-1)
    b = tn.reshape(beta, beta.shape[:-1] + (1, beta.shape[-1]))
    ctx = b @ h_bars
    return beta, tn.reshape(ctx, ctx.shape[:-2] + (ctx.shape[-1],))


def predict_darnn(d_bar: Tensor, ctx: Tensor, params: AttentionParams) -> Tensor:
    hidden = tn.concat([d_bar, ctx], axis=-1) @ params.W_y.T + params.b_w
    return hidden @ params.v_y + params.b_v


@dataclass
class DarnnModel:
    encoder: CpfLstmLayer
    decoder: CpfLstmLayer
    attention: AttentionParams
    cpf_encoder: bool = False
    cpf_decoder: bool = False

    @classmethod
    def init(cls, n: int, T: int, m: int, p: int, seed, mode: str = "darnn", K: int = 1,
             resampler: str = "continuous", weight_head: str = "mlp") -> DarnnModel:
        if mode not in MODES:
            raise ValueError(f"unknown DA-RNN mode {mode!r}; expected one of {sorted(MODES)}")
        cpf_enc, cpf_dec = MODES[mode]
        ss = np.random.SeedSequence(seed).spawn(3)
        enc = CpfLstmLayer.init(m, n, ss[0], K=K if cpf_enc else 1, stochastic=cpf_enc,
                                resampler=resampler, out_dim=0, weight_head=weight_head)
        dec = CpfLstmLayer.init(p, 1, ss[1], K=K if cpf_dec else 1, stochastic=cpf_dec,
                                resampler=resampler, out_dim=0, weight_head=weight_head)
        return cls(enc, dec, AttentionParams.init(T, m, p, ss[2]), cpf_enc, cpf_dec)

    @property
    def mode(self) -> str:
        for name, flags in MODES.items():
            if flags == (self.cpf_encoder, self.cpf_decoder):
                return name
        raise AssertionError("unreachable")

    @property
    def cpf(self) -> bool:
        return self.cpf_encoder or self.cpf_decoder

    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.named("enc."), **self.decoder.named("dec."), **self.attention.named("att.")}

    def _project_encoder(self, h: Tensor) -> np.ndarray:
        a = self.attention
        w = a.v_y.data @ a.W_y.data[:, a.p:]
        return h.data @ w

    def _project_decoder(self, d: Tensor) -> np.ndarray:
        a = self.attention
        w = a.v_y.data @ a.W_y.data[:, :a.p]
        return d.data @ w

    def encode(self, x, y_hist, rng=None) -> tuple[list[Tensor], object]:
        """Run the encoder over ``x`` ``(N, n, T)``; returns the per-step state means."""
        x = np.asarray(x, dtype=np.float64)
        T = x.shape[-1]
        att, layer = self.attention, self.encoder
        xt = Tensor(x)
        ux = xt @ att.U_e.T
        ens = layer.initial(x.shape[:-2])
        h_bar, s_bar = ens.mean_hidden(), ens.mean_cell()
        means = []
        for t in range(T):
            alpha = input_attention(xt, h_bar, s_bar, att, ux)
            x_tilde = alpha * x[..., t]
            ens = layer.propose(ens, x_tilde, rng)
            h_bar, s_bar = ens.mean_hidden(), ens.mean_cell()
            means.append(h_bar)
            if self.cpf_encoder and t < T - 1:
                ens = layer.weigh(ens, y_hist[..., t])
                ens = layer.resample(ens, rng, project=self._project_encoder)
        return means, ens

    def decode(self, y_hist, means: list[Tensor], rng=None):
        """Run the decoder over the target history; returns ``(d_bar_T, c_T, ensemble)``."""
        y_hist = np.asarray(y_hist, dtype=np.float64)
        att, layer = self.attention, self.decoder
        H = tn.concat([tn.reshape(h, h.shape[:-1] + (1, h.shape[-1])) for h in means], axis=-2)
        uh = H @ att.U_d.T
        ens = layer.initial(y_hist.shape[:-1])
        d_bar, s_bar = ens.mean_hidden(), ens.mean_cell()
        steps = y_hist.shape[-1]
        for t in range(steps):
            _, ctx = temporal_attention(H, d_bar, s_bar, att, uh)
            y_in = tn.concat([tn.Tensor(y_hist[..., t:t + 1]), ctx], axis=-1) @ att.w_tilde + att.b_tilde
            ens = layer.propose(ens, tn.reshape(y_in, y_in.shape + (1,)), rng)
            d_bar, s_bar = ens.mean_hidden(), ens.mean_cell()
            if self.cpf_decoder and t + 1 < steps:
                ens = layer.weigh(ens, y_hist[..., t + 1])
                ens = layer.resample(ens, rng, project=self._project_decoder)
        _, ctx = temporal_attention(H, d_bar, s_bar, att, uh)
        return d_bar, ctx, ens

    def forward(self, x, y_hist, label=None, rng=None, keep_ensembles: bool = False) -> Forward:
        y_hist = np.asarray(y_hist, dtype=np.float64)
        if y_hist.shape[-1] != np.shape(x)[-1] - 1:
            raise ShapeError(f"target history must have T-1 steps, got {y_hist.shape} for x {np.shape(x)}")
        means, enc_ens = self.encode(x, y_hist, rng)
        d_bar, ctx, dec_ens = self.decode(y_hist, means, rng)
        out = Forward(prediction=predict_darnn(d_bar, ctx, self.attention))
        if keep_ensembles:
            out.ensembles = [enc_ens, dec_ens]
        return out
