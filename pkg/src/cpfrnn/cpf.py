"""Particle-filter layer for recurrent networks.

The hidden state of an LSTM is carried as ``K`` weighted particles.  Each
step proposes new particles through the LSTM plus learned Gaussian noise,
re-weights them with a learned log-measurement density, and resamples.
Resampling either draws ancestors (multinomial, piecewise constant in the
parameters) or inverts a piecewise-linear smoothing of the weighted ECDF
built along a one-dimensional projection of the particles, which keeps the
resampled particles continuous in the parameters.

All particle arrays carry arbitrary leading batch axes: hidden and cell
states are ``(..., K, m)`` and weights are ``(..., K)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .lstm import LstmParams, init_lstm, lstm_gates
from .tensor import ShapeError, Tensor

NOISE_LOG_STD_RANGE = (-6.0, 2.0)
LOG_WEIGHT_CLAMP = 30.0
WEIGHT_HIDDEN = 32

Rng = np.random.Generator


class FilterError(RuntimeError):
    """A filter callback failed; the message names the step index."""


# ---------------------------------------------------------------------------
# heads


@dataclass
class Affine:
    W: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W.T + self.b

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {prefix + "W": self.W, prefix + "b": self.b}

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: Rng, scale: float | None = None, bias: float = 0.0):
        bound = 1.0 / np.sqrt(n_in) if scale is None else scale
        return cls(Tensor(rng.uniform(-bound, bound, size=(n_out, n_in)), requires_grad=True),
                   Tensor(np.full(n_out, bias), requires_grad=True))


@dataclass
class OutHead:
    """Affine map to a scalar; ``(..., d) -> (...)``."""

    affine: Affine

    def __call__(self, h: Tensor) -> Tensor:
        y = self.affine(h)
        return tn.reshape(y, y.shape[:-1])

    def named(self, prefix: str) -> dict[str, Tensor]:
        return self.affine.named(prefix)


@dataclass
class WeightHead:
    """Two-layer tanh perceptron on ``[h; y]`` returning an unclamped log weight."""

    hidden: Affine
    out: Affine

    def __call__(self, h: Tensor, y: Tensor) -> Tensor:
        y = tn.broadcast_to(tn.reshape(y, y.shape + (1, 1)), h.shape[:-1] + (1,))
        z = tn.tanh(self.hidden(tn.concat([h, y], axis=-1)))
        w = self.out(z)
        return tn.reshape(w, w.shape[:-1])

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {**self.hidden.named(prefix + "hidden."), **self.out.named(prefix + "out.")}


@dataclass
class GaussianWeightHead:
    """Gaussian log-density ``log N(y; mean(h), exp(log_scale)^2)``.

    ``mean`` may be the model's output head; a shared head is left out of
    :meth:`named` so the owner reports it once.
    """

    mean: OutHead
    log_scale: Tensor
    shared: bool = False

    def __call__(self, h: Tensor, y: Tensor) -> Tensor:
        mu = self.mean(h)
        y = tn.broadcast_to(tn.reshape(y, y.shape + (1,)), mu.shape)
        z = (y - mu) / tn.exp(self.log_scale)
        return tn.affine(tn.square(z), -0.5, -0.5 * np.log(2.0 * np.pi)) - self.log_scale

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {prefix + "log_scale": self.log_scale}
        if not self.shared:
            out.update(self.mean.named(prefix + "mean."))
        return out


WEIGHT_HEADS = ("mlp", "gaussian")


@dataclass
class CpfHeads:
    noise_head: Affine
    weight_head: WeightHead | GaussianWeightHead
    out_head: OutHead | None = None

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {**self.noise_head.named(prefix + "noise."), **self.weight_head.named(prefix + "weight.")}
        if self.out_head is not None:
            out.update(self.out_head.named(prefix + "out."))
        return out


def init_heads(m: int, n: int, seed, out_dim: int | None = None, noise_bias: float = -2.0,
               weight_head: str = "mlp") -> CpfHeads:
    """Fresh heads for state size ``m`` and input size ``n``.

    The noise head starts near zero weights with log-std ``noise_bias``;
    ``out_dim`` (default ``m``) is the input size of the output head, or
    ``0`` to omit it.  ``weight_head="gaussian"`` swaps the perceptron for
    a Gaussian density centred on the output head when that head reads
    the hidden state, or on its own affine map otherwise.
    """
    if weight_head not in WEIGHT_HEADS:
        raise ValueError(f"weight_head must be one of {', '.join(WEIGHT_HEADS)}; got {weight_head!r}")
    rng = np.random.default_rng(seed)
    noise = Affine.init(m + n, m, rng, scale=0.01, bias=noise_bias)
    weight = WeightHead(Affine.init(m + 1, WEIGHT_HIDDEN, rng), Affine.init(WEIGHT_HIDDEN, 1, rng))
    out_dim = m if out_dim is None else out_dim
    out = OutHead(Affine.init(out_dim, 1, rng)) if out_dim else None
    if weight_head == "gaussian":
        log_scale = Tensor(-1.0, requires_grad=True)
        if out_dim == m:
            weight = GaussianWeightHead(out, log_scale, shared=True)
        else:
            weight = GaussianWeightHead(OutHead(Affine.init(m, 1, rng)), log_scale)
    return CpfHeads(noise, weight, out)


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class ParticleEnsemble:
    hidden: Tensor
    cell: Tensor | None
    log_weights: Tensor
    norm_weights: Tensor

    @property
    def K(self) -> int:
        return self.hidden.shape[-2]

    @classmethod
    def uniform(cls, hidden: Tensor, cell: Tensor | None = None) -> ParticleEnsemble:
        K = hidden.shape[-2]
        lead = hidden.shape[:-1]
        return cls(hidden, cell, Tensor(np.full(lead, -np.log(K))), Tensor(np.full(lead, 1.0 / K)))

    @classmethod
    def zeros(cls, K: int, m: int, batch: tuple[int, ...] = ()) -> ParticleEnsemble:
        shape = tuple(batch) + (K, m)
        return cls.uniform(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def mean_hidden(self) -> Tensor:
        return tn.mean(self.hidden, axis=-2)

    def mean_cell(self) -> Tensor:
        return tn.mean(self.cell, axis=-2)


# ---------------------------------------------------------------------------
# transition and measurement


def _noise(noise_head: Affine, z: Tensor, rng: Rng | None) -> Tensor:
    log_std = tn.clamp(noise_head(z), *NOISE_LOG_STD_RANGE)
    zeta = rng.standard_normal(log_std.shape) if rng is not None else np.zeros(log_std.shape)
    return tn.exp(log_std) * zeta


def sample_noise(noise_head: Affine, h_prev: Tensor, x_t: Tensor, rng: Rng) -> Tensor:
    """Reparameterized Gaussian noise; log-std from the head, clamped to [-6, 2]."""
    return _noise(noise_head, tn.concat([h_prev, x_t], axis=-1), rng)


def transition_update(ensemble: ParticleEnsemble, x_t: Tensor, lstm_params: LstmParams,
                      noise_head: Affine | None, rng: Rng | None) -> ParticleEnsemble:
    """Advance every particle through the LSTM and add noise to the hidden state.

    ``x_t`` is ``(..., n)`` and is shared by all particles of a batch row.
    With ``noise_head`` or ``rng`` set to ``None`` the step is noiseless.
    """
    x_t = tn._as_tensor(x_t)
    if x_t.shape[-1] != lstm_params.n:
        raise ShapeError(f"transition_update: input size must be {lstm_params.n}, got {x_t.shape}")
    x_k = tn.broadcast_to(tn.reshape(x_t, x_t.shape[:-1] + (1, x_t.shape[-1])),
                          ensemble.hidden.shape[:-1] + (x_t.shape[-1],))
    o, c, z = lstm_gates(lstm_params, ensemble.hidden, ensemble.cell, x_k)
    h = o * tn.tanh(c)
    if noise_head is not None and rng is not None:
        h = h + _noise(noise_head, z, rng)
    return replace(ensemble, hidden=h, cell=c)


def normalize_log_weights(ensemble: ParticleEnsemble, raw: Tensor) -> ParticleEnsemble:
    logw = tn.clamp(raw, -LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP)
    return replace(ensemble, log_weights=logw, norm_weights=tn.softmax(logw, axis=-1))


def measurement_update(ensemble: ParticleEnsemble, y_t, weight_head: WeightHead) -> ParticleEnsemble:
    """Re-weight particles with the learned log-measurement density (clamped to +-30)."""
    y = tn._as_tensor(y_t)
    if not np.all(np.isfinite(y.data)):
        raise ValueError("measurement_update: observation must be finite")
    return normalize_log_weights(ensemble, weight_head(ensemble.hidden, y))


def step_loglik(log_weights) -> Tensor:
    """``log(mean_k exp(log_weights))`` over the particle axis."""
    lw = tn._as_tensor(log_weights)
    return tn.affine(tn.logsumexp(lw, axis=-1), 1.0, -np.log(lw.shape[-1]))


# ---------------------------------------------------------------------------
# resampling


def stratified_uniforms(shape: tuple[int, ...], rng: Rng | None = None, v: np.ndarray | None = None) -> np.ndarray:
    """``u_k = (k + v_k) / K`` along the last axis, ``v`` i.i.d. uniform unless given."""
    K = shape[-1]
    if v is None:
        v = rng.random(shape)
    return (np.arange(K) + np.asarray(v)) / K


def _take_particles(ensemble: ParticleEnsemble, idx: np.ndarray):
    hidden = tn.gather(ensemble.hidden, idx[..., None], axis=-2)
    cell = None if ensemble.cell is None else tn.gather(ensemble.cell, idx[..., None], axis=-2)
    return hidden, cell


def multinomial_resample(ensemble: ParticleEnsemble, rng: Rng | None = None,
                         uniforms: np.ndarray | None = None) -> ParticleEnsemble:
    """Draw K ancestors from the weighted particles and reset weights to uniform.

    Ancestors come from inverting the step ECDF (original particle order) at
    ``uniforms``, i.i.d. uniform when not supplied.
    """
    pi = ensemble.norm_weights.data
    if uniforms is None:
        uniforms = rng.random(pi.shape)
    cdf = np.cumsum(pi, axis=-1)
    idx = np.sum(cdf[..., None, :] < np.asarray(uniforms)[..., :, None], axis=-1)
    idx = np.minimum(idx, pi.shape[-1] - 1)
    hidden, cell = _take_particles(ensemble, idx)
    return ParticleEnsemble.uniform(hidden, cell)


def ecdf_coefficients(sorted_weights) -> Tensor:
    """Interval masses of the smoothed ECDF: half-weight atoms at both ends and
    the mean of neighbouring weights on each of the K-1 inner intervals."""
    pi = tn._as_tensor(sorted_weights)
    if pi.ndim == 0 or pi.shape[-1] == 0:
        raise ValueError("ecdf_coefficients: need at least one weight")
    first = tn.affine(pi[..., :1], 0.5)
    last = tn.affine(pi[..., -1:], 0.5)
    if pi.shape[-1] == 1:
        return tn.concat([first, last], axis=-1)
    inner = tn.affine(pi[..., :-1] + pi[..., 1:], 0.5)
    return tn.concat([first, inner, last], axis=-1)


def continuous_resample(ensemble: ParticleEnsemble, project: Callable[[Tensor], Tensor] | OutHead,
                        uniforms: np.ndarray) -> ParticleEnsemble:
    """Resample by inverting the piecewise-linear ECDF along ``project(hidden)``.

    Particles are stably sorted by projection.  A uniform falling in an end
    atom returns the first or last sorted particle exactly; otherwise the
    full (hidden, cell) state is interpolated linearly between the two
    neighbouring sorted particles.  The sort and interval choice are
    constants of the forward pass; the interpolation weight carries
    gradient to the particle weights.
    """
    u = np.asarray(uniforms, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("continuous_resample: uniforms must lie strictly inside (0, 1)")
    proj = project(ensemble.hidden)
    proj = proj.data if isinstance(proj, Tensor) else np.asarray(proj)
    if not np.all(np.isfinite(proj)):
        raise ValueError("continuous_resample: non-finite particle projection")
    K = ensemble.K
    order = np.argsort(proj, axis=-1, kind="stable")
    pi_sorted = tn.gather(ensemble.norm_weights, order, axis=-1)
    h_sorted, c_sorted = _take_particles(ensemble, order)

    lam = ecdf_coefficients(pi_sorted)
    cum = tn.cumsum(lam, axis=-1)
    # j = number of cumulative boundaries C_0..C_{K-1} strictly below u
    j = np.sum(cum.data[..., None, :K] < u[..., :, None], axis=-1)
    interior = (j >= 1) & (j <= K - 1)
    jj = np.clip(j, 1, K)
    lam_j = tn.gather(lam, np.minimum(jj, K), axis=-1)
    interior &= lam_j.data > 0.0
    c_prev = tn.gather(cum, jj - 1, axis=-1)
    den = tn.where(interior, lam_j, 1.0)
    gamma = tn.where(interior, (tn.Tensor(u) - c_prev) / den, 0.0)

    lo = np.clip(j - 1, 0, K - 1)
    hi = np.where(interior, np.minimum(j, K - 1), lo)
    g = tn.reshape(gamma, gamma.shape + (1,))
    one_minus = tn.affine(g, -1.0, 1.0)

    def mix(states):
        a = tn.gather(states, lo[..., None], axis=-2)
        b = tn.gather(states, hi[..., None], axis=-2)
        return one_minus * a + g * b

    hidden = mix(h_sorted)
    cell = None if c_sorted is None else mix(c_sorted)
    return ParticleEnsemble.uniform(hidden, cell)


def ecdf_sup_distance(norm_weights) -> float:
    """Upper bound ``max_k pi_k / 2`` on the sup-distance between the step and
    smoothed ECDFs."""
    return float(np.max(np.asarray(norm_weights)) / 2.0)


def step_ecdf(points: np.ndarray, weights: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Weighted step ECDF of scalar ``points`` evaluated on ``grid``."""
    order = np.argsort(points, kind="stable")
    p, w = np.asarray(points)[order], np.asarray(weights)[order]
    cdf = np.concatenate([[0.0], np.cumsum(w)])
    return cdf[np.searchsorted(p, grid, side="right")]


def smoothed_ecdf(points: np.ndarray, weights: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Piecewise-linear ECDF used by :func:`continuous_resample`, on ``grid``."""
    order = np.argsort(points, kind="stable")
    p, w = np.asarray(points, dtype=float)[order], np.asarray(weights, dtype=float)[order]
    lam = ecdf_coefficients(w).data
    K = p.size
    grid = np.asarray(grid, dtype=float)
    out = lam[0] * (grid >= p[0])
    for k in range(K - 1):
        width = p[k + 1] - p[k]
        if width > 0:
            z = np.clip((grid - p[k]) / width, 0.0, 1.0)
        else:
            z = (grid >= p[k]).astype(float)
        out = out + lam[k + 1] * z
    return out + lam[K] * (grid >= p[-1])


# ---------------------------------------------------------------------------
# prediction and generic filtering


def predict_mean(ensemble: ParticleEnsemble, out_head: OutHead) -> Tensor:
    return out_head(ensemble.mean_hidden())


@dataclass
class FilterResult:
    ensembles: list[ParticleEnsemble]
    logliks: list[float]
    loglik: float


def filter_sequence(transition: Callable[[ParticleEnsemble, int, Rng], ParticleEnsemble],
                    log_density: Callable[[Tensor, float], Tensor | np.ndarray],
                    resampler: Callable[[ParticleEnsemble, Rng], ParticleEnsemble],
                    init: ParticleEnsemble, observations: Sequence[float], rng: Rng,
                    keep: bool = True) -> FilterResult:
    """Generic SIR loop with plug-in densities.

    Each step runs ``transition``, weights by ``log_density(hidden, y_t)``,
    records ``log mean_k w_k`` and resamples.  The total is the usual SMC
    estimate of the marginal log-likelihood.
    """
    ys = list(observations)
    if not ys:
        raise ValueError("filter_sequence: need at least one observation")
    ens, kept, logliks = init, [], []
    for t, y in enumerate(ys):
        try:
            ens = transition(ens, t, rng)
            raw = log_density(ens.hidden, y)
            ens = normalize_log_weights(ens, tn._as_tensor(raw))
            logliks.append(float(step_loglik(ens.log_weights).data))
            if keep:
                kept.append(ens)
            ens = resampler(ens, rng)
        except Exception as exc:
            raise FilterError(f"filter step {t}: {exc}") from exc
    return FilterResult(kept, logliks, float(np.sum(logliks)))


# ---------------------------------------------------------------------------
# CPF-LSTM layer


@dataclass
class CpfLstmLayer:
    """LSTM whose hidden state is a particle ensemble.

    ``K=1`` with ``stochastic=False`` gives an ordinary deterministic LSTM.
    """

    lstm: LstmParams
    heads: CpfHeads
    K: int = 1
    stochastic: bool = True
    resampler: str = "continuous"

    @classmethod
    def init(cls, m: int, n: int, seed, K: int = 1, stochastic: bool = True,
             resampler: str = "continuous", out_dim: int | None = None,
             weight_head: str = "mlp") -> CpfLstmLayer:
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        ss = seed.spawn(2)
        return cls(init_lstm(m, n, ss[0]), init_heads(m, n, ss[1], out_dim=out_dim, weight_head=weight_head),
                   K=K, stochastic=stochastic, resampler=resampler)

    @property
    def m(self) -> int:
        return self.lstm.m

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.lstm.named(prefix)
        if self.stochastic:
            out.update(self.heads.named(prefix))
        elif self.heads.out_head is not None:
            out.update(self.heads.out_head.named(prefix + "out."))
        return out

    def initial(self, batch: tuple[int, ...] = ()) -> ParticleEnsemble:
        return ParticleEnsemble.zeros(self.K if self.stochastic else 1, self.m, batch)

    def propose(self, ens: ParticleEnsemble, x_t, rng: Rng | None) -> ParticleEnsemble:
        noise = self.heads.noise_head if self.stochastic else None
        return transition_update(ens, x_t, self.lstm, noise, rng if self.stochastic else None)

    def weigh(self, ens: ParticleEnsemble, y_t) -> ParticleEnsemble:
        return measurement_update(ens, y_t, self.heads.weight_head)

    def resample(self, ens: ParticleEnsemble, rng: Rng, project=None) -> ParticleEnsemble:
        if self.resampler == "multinomial":
            return multinomial_resample(ens, rng)
        if self.resampler == "continuous":
            project = project or self.heads.out_head
            return continuous_resample(ens, project, stratified_uniforms(ens.norm_weights.shape, rng))
        raise ValueError(f"unknown resampler {self.resampler!r}")
