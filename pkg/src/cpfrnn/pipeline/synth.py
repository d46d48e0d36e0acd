"""Synthetic series used as fixtures and as a desk-scale stand-in for market data."""

from __future__ import annotations

import numpy as np

from .data import DataError, SeriesDataset
from .kalman import stationary_variance

KINDS = ("linear-gaussian", "stochastic-volatility", "driven-ar")

DEFAULTS = {
    "linear-gaussian": {"a": 0.9, "sigma_w": 0.5, "sigma_v": 0.5, "h0": None},
    "stochastic-volatility": {"phi": 0.95, "sigma": 0.3, "mu": 0.0},
    "driven-ar": {"n": 5, "phi": 0.7, "driver_phi": 0.9, "sigma": 0.5, "gain": 1.0},
}


def _lagged(y: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], y[:-1]])[None, :]


def synth_generate(kind: str, length: int, params: dict | None = None, seed=0) -> SeriesDataset:
    """Generate ``length`` steps of one of :data:`KINDS`.

    The two state-space kinds carry a single driving series equal to the
    previous observation (zero at the first step) so that every model has an
    input.  ``driven-ar`` builds ``n`` AR(1) drivers and a target
    ``y_t = phi y_{t-1} + gain * beta . x_t + sigma e_t``.
    """
    if kind not in KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; expected one of {', '.join(KINDS)}")
    unknown = set(params or {}) - set(DEFAULTS[kind])
    if unknown:
        raise DataError(f"unknown parameters for {kind}: {sorted(unknown)}")
    p = {**DEFAULTS[kind], **(params or {})}
    if length < 2:
        raise DataError(f"length must be at least 2, got {length}")
    rng = np.random.default_rng(seed)

    if kind == "linear-gaussian":
        a, sw, sv = float(p["a"]), float(p["sigma_w"]), float(p["sigma_v"])
        if abs(a) >= 1:
            raise DataError(f"linear-gaussian requires |a| < 1, got a={a}")
        h = float(p["h0"]) if p["h0"] is not None else rng.normal(0.0, np.sqrt(stationary_variance(a, sw)))
        w = rng.standard_normal(length) * sw
        v = rng.standard_normal(length) * sv
        y = np.empty(length)
        for t in range(length):
            h = a * h + w[t]
            y[t] = h + v[t]
        return SeriesDataset(_lagged(y), y, ["y_lag"])

    if kind == "stochastic-volatility":
        phi, sigma, mu = float(p["phi"]), float(p["sigma"]), float(p["mu"])
        if abs(phi) >= 1:
            raise DataError(f"stochastic-volatility requires |phi| < 1, got phi={phi}")
        h = mu + rng.normal(0.0, sigma / np.sqrt(1.0 - phi * phi))
        eta = rng.standard_normal(length) * sigma
        v = rng.standard_normal(length)
        y = np.empty(length)
        for t in range(length):
            h = mu + phi * (h - mu) + eta[t]
            y[t] = np.exp(h / 2.0) * v[t]
        return SeriesDataset(_lagged(y), y, ["y_lag"])

    n = int(p["n"])
    phi, dphi = float(p["phi"]), float(p["driver_phi"])
    if abs(phi) >= 1 or abs(dphi) >= 1:
        raise DataError(f"driven-ar requires |phi| < 1 and |driver_phi| < 1, got {phi}, {dphi}")
    if n < 1:
        raise DataError(f"driven-ar needs n >= 1 drivers, got {n}")
    beta = rng.standard_normal(n) / np.sqrt(n)
    x = np.empty((n, length))
    xt = rng.standard_normal(n) / np.sqrt(1.0 - dphi * dphi)
    innov = rng.standard_normal((length, n))
    noise = rng.standard_normal(length) * float(p["sigma"])
    y = np.empty(length)
    prev = 0.0
    for t in range(length):
        xt = dphi * xt + innov[t]
        x[:, t] = xt
        prev = phi * prev + float(p["gain"]) * beta @ xt + noise[t]
        y[t] = prev
    return SeriesDataset(x, y, [f"x{k + 1}" for k in range(n)])
