from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    mae: float
    mape_percent: float | None
    rmse: float

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mape_percent": self.mape_percent, "rmse": self.rmse}

    def table_row(self) -> str:
        """Human-readable line; MAPE is also shown in units of 0.1 % (the x10^-1 % column scale)."""
        mape = "n/a" if self.mape_percent is None else f"{self.mape_percent:.4f}% ({self.mape_percent / 10:.4f} x10^-1 %)"
        return f"MAE {self.mae:.4f}  MAPE {mape}  RMSE {self.rmse:.4f}"


def compute_metrics(y, y_hat) -> Metrics:
    """MAE, MAPE (plain percent, ``None`` if any target is zero) and RMSE."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"compute_metrics: shapes differ, {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("compute_metrics: empty input")
    err = y - y_hat
    mape = None if np.any(y == 0) else float(np.mean(np.abs(err / y)) * 100.0)
    return Metrics(float(np.mean(np.abs(err))), mape, float(np.sqrt(np.mean(err * err))))
