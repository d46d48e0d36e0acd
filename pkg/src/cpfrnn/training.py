"""Objectives, optimizer and the minibatch training loop."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .cpf import WEIGHT_HEADS
from .darnn import MODES as DARNN_MODES
from .darnn import DarnnModel
from .rnn import RnnModel
from .tensor import Graph, Tensor, backward

log = logging.getLogger(__name__)

MODEL_MODES = ("rnn", "cpf-rnn") + tuple(DARNN_MODES)
RESAMPLERS = ("multinomial", "continuous")
NORMALIZATIONS = ("zscore", "minmax", "none")
DIVERGENCE_LIMIT = 1e8


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class RunConfig:
    model: str = "cpf-rnn"
    K: int = 10
    T: int = 10
    m: int = 16
    p: int = 16
    kappa: float = 0.1
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    resampler: str = "continuous"
    weight_head: str = "mlp"
    normalization: str = "zscore"
    train_fraction: float = 0.8
    target: str = "y"
    clip_norm: float = 5.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_MODES:
            raise ConfigError(f"model must be one of {', '.join(MODEL_MODES)}; got {self.model!r}")
        if self.resampler not in RESAMPLERS:
            raise ConfigError(f"resampler must be one of {', '.join(RESAMPLERS)}; got {self.resampler!r}")
        if self.weight_head not in WEIGHT_HEADS:
            raise ConfigError(f"weight_head must be one of {', '.join(WEIGHT_HEADS)}; got {self.weight_head!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {', '.join(NORMALIZATIONS)}; got {self.normalization!r}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1; got {self.K}")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2; got {self.T}")
        if self.kappa < 0:
            raise ConfigError(f"kappa must be >= 0; got {self.kappa}")
        if self.m < 1 or self.p < 1:
            raise ConfigError(f"m and p must be >= 1; got m={self.m}, p={self.p}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1); got {self.train_fraction}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0; got {self.lr}")

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        """Parse flat ``key=value`` lines; ``#`` starts a comment; unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r} (known: {', '.join(types)})")
            conv = {"int": int, "float": float, "str": str}[types[key]]
            try:
                values[key] = conv(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} expects {types[key]}, got {val!r}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> RunConfig:
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def build_model(config: RunConfig, n: int):
    if config.model in ("rnn", "cpf-rnn"):
        return RnnModel.init(n, config.m, config.seed, K=config.K, cpf=config.model == "cpf-rnn",
                             resampler=config.resampler, weight_head=config.weight_head)
    return DarnnModel.init(n, config.T, config.m, config.p, config.seed, mode=config.model,
                           K=config.K, resampler=config.resampler, weight_head=config.weight_head)


# ---------------------------------------------------------------------------
# objectives


def mse_objective(pred, target) -> Tensor:
    pred = tn._as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise tn.ShapeError(f"mse_objective: shapes differ, {pred.shape} vs {target.shape}")
    if target.size == 0:
        raise ValueError("mse_objective: empty input")
    return tn.mean(tn.square(pred - target))


def elbo_objective(log_weights) -> Tensor:
    """Sum over steps of log-mean-exp of the N*K log weights at that step.

    Accepts an ``(N, T, K)`` array/tensor or a length-``T`` list of ``(N, K)``
    tensors.
    """
    if isinstance(log_weights, (list, tuple)):
        if not log_weights:
            return Tensor(0.0)
        steps = [tn.reshape(lw, (1,) + lw.shape) for lw in log_weights]
        lw = tn.concat(steps, axis=0)  # (T, N, K)
        count = lw.shape[1] * lw.shape[2]
        return tn.affine(tn.logsumexp(lw, axis=(1, 2)), 1.0, -np.log(count)).sum()
    lw = tn._as_tensor(log_weights)
    count = lw.shape[0] * lw.shape[2]
    return tn.affine(tn.logsumexp(lw, axis=(0, 2)), 1.0, -np.log(count)).sum()


def combined_objective(mse, elbo, kappa: float):
    """Loss to minimize: ``mse - kappa * elbo``."""
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    return mse - kappa * elbo


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
                   lr: float) -> bool:
    """Bias-corrected Adam update in place.  Returns False (and leaves
    everything untouched) if any gradient is non-finite."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise tn.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("skipping optimizer step %d: non-finite gradient for %s", state.t + 1, name)
            return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def param_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Windows:
    """A stack of windows: ``x`` ``(N, n, T)``, ``y_hist`` ``(N, T-1)``, ``label`` ``(N,)``."""

    x: np.ndarray
    y_hist: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return self.label.shape[0]

    def take(self, idx) -> Windows:
        return Windows(self.x[idx], self.y_hist[idx], self.label[idx])


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_mse: list[float] = field(default_factory=list)
    epoch_elbo: list[float] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checksum: str = ""
    skipped_steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def batch_loss(model, batch: Windows, config: RunConfig, rng) -> tuple[Tensor, Tensor, Tensor | None]:
    """Forward a batch and return ``(loss, mse, elbo)``; DA-RNN modes use MSE only."""
    fwd = model.forward(batch.x, batch.y_hist, batch.label, rng)
    mse = mse_objective(fwd.prediction, batch.label)
    if isinstance(model, RnnModel) and model.cpf and config.kappa > 0:
        elbo = elbo_objective(fwd.log_weights)
        return combined_objective(mse, elbo, config.kappa), mse, elbo
    return mse, mse, None


def predict(model, windows: Windows, seed: int = 0, batch_size: int = 512) -> np.ndarray:
    """Point forecasts for every window, without using the labels."""
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, len(windows), batch_size):
        b = windows.take(slice(start, start + batch_size))
        out.append(model.forward(b.x, b.y_hist, None, rng).prediction.data)
    return np.concatenate(out) if out else np.zeros(0)


def train(config: RunConfig, data: Windows, validation: Windows | None = None, model=None,
          epoch_callback=None):
    """Train a fresh (or given) model on ``data``; reproducible under ``config.seed``."""
    if len(data) == 0:
        raise ValueError("train: no training windows")
    if data.x.shape[-1] != config.T:
        raise ConfigError(f"windows have T={data.x.shape[-1]} but config T={config.T}")
    model = model or build_model(config, data.x.shape[1])
    params = model.params()
    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    report = TrainReport()
    start = time.perf_counter()
    N = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        tot_loss = tot_mse = tot_elbo = 0.0
        for b, s in enumerate(range(0, N, config.batch_size)):
            batch = data.take(order[s:s + config.batch_size])
            with Graph() as g:
                loss, mse, elbo = batch_loss(model, batch, config, rng)
                value = loss.item()
                if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
                    raise DivergenceError(f"loss {value} at epoch {epoch}, batch {b}")
                grads_all = backward(loss, g)
            grads = {name: np.array(grads_all[t]) for name, t in params.items()}
            clip_global_norm(grads, config.clip_norm)
            optimizer_step(params, grads, state, config.lr)
            w = len(batch) / N
            tot_loss += w * value
            tot_mse += w * mse.item()
            tot_elbo += w * (elbo.item() if elbo is not None else 0.0)
        report.epoch_loss.append(tot_loss)
        report.epoch_mse.append(tot_mse)
        report.epoch_elbo.append(tot_elbo)
        if validation is not None and len(validation):
            pred = predict(model, validation, seed=config.seed)
            err = pred - validation.label
            report.validation.append({"mse": float(np.mean(err ** 2)), "mae": float(np.mean(np.abs(err)))})
        log.info("epoch %d loss %.6g mse %.6g", epoch, tot_loss, tot_mse)
        if epoch_callback is not None:
            epoch_callback(epoch, model, report)
    report.wall_time = time.perf_counter() - start
    report.checksum = param_checksum(params)
    report.skipped_steps = state.skipped
    return model, report


def stack_windows(items: Sequence[Windows]) -> Windows:
    return Windows(np.concatenate([w.x for w in items]), np.concatenate([w.y_hist for w in items]),
                   np.concatenate([w.label for w in items]))
