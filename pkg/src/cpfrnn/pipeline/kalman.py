"""Exact likelihood of the scalar linear-Gaussian state-space model.

    h_t = a h_{t-1} + w_t,   w_t ~ N(0, sigma_w^2)
    y_t = h_t + v_t,         v_t ~ N(0, sigma_v^2)

``prior`` is the distribution of the first latent state h_1.
"""

from __future__ import annotations

import numpy as np


def stationary_variance(a: float, sigma_w: float) -> float:
    if abs(a) >= 1:
        raise ValueError(f"no stationary distribution for |a| >= 1 (a={a})")
    return sigma_w ** 2 / (1.0 - a * a)


def kalman_loglik(a: float, sigma_w: float, sigma_v: float, observations,
                  prior_mean: float = 0.0, prior_var: float | None = None) -> float:
    if sigma_w < 0 or sigma_v <= 0:
        raise ValueError(f"variances must be positive (sigma_w={sigma_w}, sigma_v={sigma_v})")
    if prior_var is None:
        prior_var = stationary_variance(a, sigma_w)
    if prior_var <= 0:
        raise ValueError(f"prior variance must be positive, got {prior_var}")
    mean, var = float(prior_mean), float(prior_var)
    r = sigma_v ** 2
    total = 0.0
    for t, y in enumerate(np.asarray(observations, dtype=np.float64)):
        if t > 0:
            mean = a * mean
            var = a * a * var + sigma_w ** 2
        s = var + r
        resid = y - mean
        total += -0.5 * (np.log(2.0 * np.pi * s) + resid * resid / s)
        gain = var / s
        mean = mean + gain * resid
        var = (1.0 - gain) * var
    return float(total)


def bootstrap_loglik(a: float, sigma_w: float, sigma_v: float, observations, K: int,
                     rng: np.random.Generator, resampler: str = "multinomial",
                     prior_mean: float = 0.0, prior_var: float | None = None):
    """Particle estimate of :func:`kalman_loglik` with the exact model as plug-in densities.

    Returns the :class:`~cpfrnn.cpf.FilterResult` of a bootstrap filter whose
    particles are the scalar latent state.
    """
    from .. import cpf

    if prior_var is None:
        prior_var = stationary_variance(a, sigma_w)
    log_norm = -0.5 * np.log(2.0 * np.pi * sigma_v ** 2)

    def transition(ens, t, rng):
        if t == 0:
            h = prior_mean + np.sqrt(prior_var) * rng.standard_normal((K, 1))
        else:
            h = a * ens.hidden.data + sigma_w * rng.standard_normal((K, 1))
        return cpf.ParticleEnsemble.uniform(cpf.Tensor(h))

    def log_density(hidden, y):
        r = (y - hidden.data[:, 0]) / sigma_v
        return log_norm - 0.5 * r * r

    if resampler == "multinomial":
        def resample(ens, rng):
            return cpf.multinomial_resample(ens, rng)
    elif resampler == "continuous":
        def resample(ens, rng):
            u = cpf.stratified_uniforms((K,), rng)
            return cpf.continuous_resample(ens, lambda h: h.data[:, 0], u)
    else:
        raise ValueError(f"unknown resampler {resampler!r}")
    init = cpf.ParticleEnsemble.zeros(K, 1)
    init.cell = None
    return cpf.filter_sequence(transition, log_density, resample, init, observations, rng)
