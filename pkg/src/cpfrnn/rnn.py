"""Single-layer forecaster: plain LSTM or CPF-LSTM with a scalar output head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .cpf import CpfLstmLayer, predict_mean, step_loglik
from .tensor import Tensor


@dataclass
class Forward:
    """Result of unrolling a model over a batch of windows."""

    prediction: Tensor
    log_weights: list[Tensor] = field(default_factory=list)
    ensembles: list = field(default_factory=list)

    def step_logliks(self) -> list[Tensor]:
        return [step_loglik(lw) for lw in self.log_weights]


@dataclass
class RnnModel:
    """``rnn`` (deterministic, one particle) or ``cpf-rnn`` (K weighted particles).

    The target history enters only through the CPF measurement updates; the
    recurrence itself sees the driving series.
    """

    layer: CpfLstmLayer

    @classmethod
    def init(cls, n: int, m: int, seed, K: int = 1, cpf: bool = False,
             resampler: str = "continuous", weight_head: str = "mlp") -> RnnModel:
        return cls(CpfLstmLayer.init(m, n, seed, K=K, stochastic=cpf, resampler=resampler,
                                     weight_head=weight_head))

    @property
    def cpf(self) -> bool:
        return self.layer.stochastic

    @property
    def out_head(self):
        return self.layer.heads.out_head

    def params(self) -> dict[str, Tensor]:
        return self.layer.named("rnn.")

    def forward(self, x, y_hist, label=None, rng: np.random.Generator | None = None,
                keep_ensembles: bool = False) -> Forward:
        """Unroll over windows ``x`` of shape ``(N, n, T)`` with history ``(N, T-1)``.

        The prediction at step ``T`` is read from the proposed particles before
        any weighting by ``label``; the label only adds the last ELBO term.
        """
        x = np.asarray(x, dtype=np.float64)
        y_hist = np.asarray(y_hist, dtype=np.float64)
        T = x.shape[-1]
        if y_hist.shape[-1] != T - 1:
            raise tn.ShapeError(f"target history must have T-1={T - 1} steps, got {y_hist.shape}")
        layer = self.layer
        ens = layer.initial(x.shape[:-2])
        out = Forward(prediction=None)
        for t in range(T):
            ens = layer.propose(ens, x[..., t], rng)
            if t == T - 1:
                out.prediction = predict_mean(ens, self.out_head)
            if not self.cpf:
                continue
            y_t = y_hist[..., t] if t < T - 1 else label
            if y_t is None:
                break
            ens = layer.weigh(ens, np.asarray(y_t, dtype=np.float64))
            out.log_weights.append(ens.log_weights)
            if keep_ensembles:
                out.ensembles.append(ens)
            if t < T - 1:
                ens = layer.resample(ens, rng)
        return out
