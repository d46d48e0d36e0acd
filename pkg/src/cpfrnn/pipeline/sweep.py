"""Loss along a one-dimensional parameter ray with common random numbers.

Every grid point re-seeds the same generator, so the noise draws and the
resampling uniforms are identical across the ray and across resamplers;
remaining jumps in the loss come from the resampling step itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..training import RunConfig, Windows, batch_loss, build_model


@dataclass
class SweepResult:
    offsets: np.ndarray
    losses: dict[str, np.ndarray]

    def max_jump(self, resampler: str) -> float:
        return float(np.max(np.abs(np.diff(self.losses[resampler]))))

    def summary(self) -> dict:
        out = {f"max_jump_{k}": self.max_jump(k) for k in self.losses}
        if {"continuous", "multinomial"} <= set(self.losses):
            mult = self.max_jump("multinomial")
            out["jump_ratio"] = self.max_jump("continuous") / mult if mult > 0 else float("inf")
        return out

    def to_csv(self, path) -> None:
        names = sorted(self.losses)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["offset"] + [f"loss_{k}" for k in names])
            for i, s in enumerate(self.offsets):
                w.writerow([repr(float(s))] + [repr(float(self.losses[k][i])) for k in names])


def _layers(model):
    if hasattr(model, "layer"):
        return [model.layer]
    return [model.encoder, model.decoder]


def run_sweep(config: RunConfig, windows: Windows, points: int = 1000, radius: float = 0.5,
              batch: int = 16, resamplers=("continuous", "multinomial"), model=None) -> SweepResult:
    """Evaluate the training loss at ``points`` evenly spaced offsets in
    ``[-radius, radius]`` along a random unit direction in parameter space."""
    if config.model in ("rnn", "darnn"):
        raise ValueError(f"sweep needs a particle model, got model={config.model!r}")
    model = model or build_model(config, windows.x.shape[1])
    params = model.params()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    direction = {k: rng.standard_normal(t.shape) for k, t in params.items()}
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
    base = {k: t.data.copy() for k, t in params.items()}
    fixed = windows.take(slice(0, batch))
    offsets = np.linspace(-radius, radius, points)
    losses = {r: np.empty(points) for r in resamplers}
    try:
        for i, s in enumerate(offsets):
            for k, t in params.items():
                t.data[...] = base[k] + (s / norm) * direction[k]
            for r in resamplers:
                for layer in _layers(model):
                    layer.resampler = r
                crn = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
                loss, _, _ = batch_loss(model, fixed, config, crn)
                losses[r][i] = loss.item()
    finally:
        for k, t in params.items():
            t.data[...] = base[k]
        for layer in _layers(model):
            layer.resampler = config.resampler
    return SweepResult(offsets, losses)
