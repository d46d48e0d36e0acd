from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..training import Windows

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class SeriesDataset:
    """Driving series ``(n, L)`` and target ``(L,)`` in time order."""

    driving: np.ndarray
    target: np.ndarray
    names: list[str]
    target_name: str = "y"

    def __post_init__(self):
        self.driving = np.asarray(self.driving, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.driving.ndim != 2 or self.driving.shape[1] != self.target.shape[0]:
            raise DataError(f"driving {self.driving.shape} does not match target length {self.target.shape}")
        if len(self.names) != self.driving.shape[0]:
            raise DataError(f"{len(self.names)} names for {self.driving.shape[0]} driving series")
        if not (np.all(np.isfinite(self.driving)) and np.all(np.isfinite(self.target))):
            raise DataError("dataset contains missing or non-finite values")

    @property
    def n(self) -> int:
        return self.driving.shape[0]

    @property
    def L(self) -> int:
        return self.target.shape[0]

    def windows(self, T: int) -> Windows:
        """Stride-1 windows; window ``j`` covers steps ``j..j+T-1`` and is labelled by the last one.

        Produces ``L - T`` windows.
        """
        if self.L < T + 1:
            raise DataError(f"need at least T+1={T + 1} rows for windows, have {self.L}")
        count = self.L - T
        xs = np.lib.stride_tricks.sliding_window_view(self.driving, T, axis=1)[:, :count]
        ys = np.lib.stride_tricks.sliding_window_view(self.target, T)[:count]
        return Windows(np.ascontiguousarray(xs.transpose(1, 0, 2)), ys[:, :-1].copy(), ys[:, -1].copy())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.names) + [self.target_name])
            for row in np.column_stack([self.driving.T, self.target]):
                w.writerow([repr(float(v)) for v in row])


def load_csv(path, target: str) -> SeriesDataset:
    """Read a header-first numeric CSV; ``target`` names the target column, the rest drive."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target not in header:
        raise DataError(f"{path}: target column {target!r} not in header {header}")
    if len(header) < 2:
        raise DataError(f"{path}: need a target and at least one driving column")
    body = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                body[i - 2, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i}, column {j + 1} ({header[j]!r}): cannot parse {cell!r}") from None
            if not np.isfinite(body[i - 2, j]):
                raise DataError(f"{path}: row {i}, column {j + 1} ({header[j]!r}): non-finite value")
    ti = header.index(target)
    keep = [j for j in range(len(header)) if j != ti]
    return SeriesDataset(body[:, keep].T, body[:, ti], [header[j] for j in keep], target)


def split_train_test(ds: SeriesDataset, fraction: float, T: int) -> tuple[SeriesDataset, SeriesDataset]:
    """Chronological split at ``floor(fraction * L)``; windows are built per side."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must lie in (0, 1), got {fraction}")
    cut = int(np.floor(fraction * ds.L))
    if cut < T + 1 or ds.L - cut < T + 1:
        raise DataError(f"split at {cut} of {ds.L} rows leaves fewer than T+1={T + 1} rows on one side")
    return (replace(ds, driving=ds.driving[:, :cut], target=ds.target[:cut]),
            replace(ds, driving=ds.driving[:, cut:], target=ds.target[cut:]))


@dataclass
class Scaler:
    mode: str
    x_center: np.ndarray
    x_scale: np.ndarray
    y_center: float = 0.0
    y_scale: float = 1.0
    warnings: list[str] = field(default_factory=list)

    def apply(self, ds: SeriesDataset) -> SeriesDataset:
        return replace(ds, driving=(ds.driving - self.x_center[:, None]) / self.x_scale[:, None],
                       target=(ds.target - self.y_center) / self.y_scale)

    def invert(self, ds: SeriesDataset) -> SeriesDataset:
        return replace(ds, driving=ds.driving * self.x_scale[:, None] + self.x_center[:, None],
                       target=self.denormalize_target(ds.target))

    def denormalize_target(self, y):
        return np.asarray(y) * self.y_scale + self.y_center

    def arrays(self) -> dict[str, np.ndarray]:
        return {"x_center": self.x_center, "x_scale": self.x_scale,
                "y": np.array([self.y_center, self.y_scale])}

    @classmethod
    def from_arrays(cls, mode: str, arrays: dict[str, np.ndarray]) -> Scaler:
        y = arrays["y"]
        return cls(mode, arrays["x_center"], arrays["x_scale"], float(y[0]), float(y[1]))


def fit_scaler(train: SeriesDataset, mode: str) -> Scaler:
    full = np.vstack([train.driving, train.target[None, :]])
    warnings = []
    if mode == "none":
        center, scale = np.zeros(full.shape[0]), np.ones(full.shape[0])
    elif mode == "zscore":
        center, scale = full.mean(axis=1), full.std(axis=1)
    elif mode == "minmax":
        center, scale = full.min(axis=1), full.max(axis=1) - full.min(axis=1)
    else:
        raise DataError(f"normalization must be zscore, minmax or none; got {mode!r}")
    names = list(train.names) + [train.target_name]
    for k in np.flatnonzero(scale == 0):
        warnings.append(f"column {names[k]!r} is constant; scale 1 substituted")
        log.warning(warnings[-1])
        scale[k] = 1.0
    return Scaler(mode, center[:-1], scale[:-1], float(center[-1]), float(scale[-1]), warnings)


def normalize(train: SeriesDataset, test: SeriesDataset, mode: str):
    """Fit statistics on ``train`` only and apply them to both sides."""
    scaler = fit_scaler(train, mode)
    return scaler.apply(train), scaler.apply(test), scaler
