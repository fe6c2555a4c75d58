"""Forecast error metrics, the historical-index baseline and horizon reports."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedMetricError

DEFAULT_MAPE_FLOOR = 1e-3


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"targets {y.shape} and predictions {y_hat.shape} differ in shape")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y_hat - y)))


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def mape(y, y_hat, floor: float = DEFAULT_MAPE_FLOOR) -> float:
    """Mean absolute percentage error over entries with ``|y| > floor``, in percent."""
    if floor < 0:
        raise ValueError("MAPE floor must be non-negative")
    y, y_hat = _pair(y, y_hat)
    keep = np.abs(y) > floor
    if not keep.any():
        raise UndefinedMetricError(f"no target exceeds the MAPE floor {floor}")
    return float(np.mean(np.abs(y_hat[keep] - y[keep]) / np.abs(y[keep])) * 100.0)


def _mape_or_none(y, y_hat, floor):
    try:
        return mape(y, y_hat, floor)
    except UndefinedMetricError:
        return None


def hi_baseline(window, output_len: int, mode: str = "last", slots_per_day: int | None = None):
    """Historical-index forecast for ``window[..., m, N, d]``.

    ``last`` repeats the final frame for every horizon.  ``daily`` copies the
    value observed one day before each target step; it needs ``m >= slots_per_day``
    and ``output_len <= slots_per_day`` and otherwise falls back to ``last``.
    """
    window = np.asarray(window)
    m = window.shape[-3]
    if m < 1:
        raise ValueError("historical index needs at least one input step")
    if mode == "daily":
        if slots_per_day and m >= slots_per_day and output_len <= slots_per_day:
            idx = m - slots_per_day + np.arange(output_len)
            return np.take(window, idx, axis=-3)
        warnings.warn("daily historical index needs a full day of history; using the last frame")
    elif mode != "last":
        raise ValueError(f"unknown historical index mode {mode!r}")
    last = window[..., m - 1:m, :, :]
    return np.repeat(last, output_len, axis=-3)


def horizon_label(index: int, granularity_minutes: int) -> str:
    return f"{(index + 1) * granularity_minutes} min"


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape_pct: float | None
    n: int
    per_horizon: list = field(default_factory=list)
    units: str = "original"
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        pairs = [(self.mae, self.rmse)] + [(r["mae"], r["rmse"]) for r in self.per_horizon]
        for a, r in pairs:
            # MAE <= RMSE holds algebraically; the slack only absorbs rounding
            if not a <= r * (1 + 1e-12) + 1e-15:
                raise AssertionError(f"MAE {a} exceeds RMSE {r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        fields = ["horizon", "minutes", "label", "mae", "rmse", "mape_pct", "n", "config_hash"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for row in self.per_horizon:
                w.writerow({k: _fmt(row[k]) for k in fields[:-1]} | {"config_hash": self.config_hash})
            w.writerow({"horizon": "all", "minutes": "", "label": "all", "mae": _fmt(self.mae),
                        "rmse": _fmt(self.rmse), "mape_pct": _fmt(self.mape_pct), "n": self.n,
                        "config_hash": self.config_hash})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def horizon_report(predictions, targets, horizons=None, granularity_minutes: int = 5,
                   normalizer=None, mape_floor: float = DEFAULT_MAPE_FLOOR,
                   config_hash: str = "", seed: int = 0) -> MetricsReport:
    """Metrics per horizon index and pooled over all horizons.

    ``predictions`` and ``targets`` are ``(samples, z, N, d)``.  With a
    ``normalizer`` both are mapped back to original units first.
    """
    y, y_hat = _pair(targets, predictions)
    if y.ndim != 4:
        raise ShapeError(f"expected (samples, z, N, d), got {y.shape}")
    z = y.shape[1]
    horizons = list(range(z)) if horizons is None else [int(h) for h in horizons]
    for h in horizons:
        if not 0 <= h < z:
            raise IndexError(f"horizon {h} outside 0..{z - 1}")
    units = "normalized"
    if normalizer is not None:
        y, y_hat = normalizer.inverse(y), normalizer.inverse(y_hat)
        units = "original"
    rows = []
    for h in horizons:
        yh, ph = y[:, h], y_hat[:, h]
        rows.append({"horizon": h, "minutes": (h + 1) * granularity_minutes,
                     "label": horizon_label(h, granularity_minutes),
                     "mae": mae(yh, ph), "rmse": rmse(yh, ph),
                     "mape_pct": _mape_or_none(yh, ph, mape_floor), "n": int(yh.size)})
    return MetricsReport(mae=mae(y, y_hat), rmse=rmse(y, y_hat),
                         mape_pct=_mape_or_none(y, y_hat, mape_floor), n=int(y.size),
                         per_horizon=rows, units=units, config_hash=config_hash, seed=seed)
