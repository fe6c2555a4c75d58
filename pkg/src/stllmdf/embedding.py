"""Input embedding: feature projection, calendar lookups and the adaptive array.

The hidden representation is the last-axis concatenation, in this fixed order,
of

* the feature embedding (width ``d_f``),
* the periodicity embedding, day-of-week row then time-of-day row (``2 * d_f``),
* the spatio-temporal adaptive embedding (``d_a``),

so its width is ``d_h = 3 * d_f + d_a``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError

MINUTES_PER_DAY = 1440


def slots_per_day(granularity_minutes: int) -> int:
    """Time-of-day vocabulary size for a sampling granularity (288 at 5 minutes)."""
    if granularity_minutes <= 0 or MINUTES_PER_DAY % granularity_minutes:
        raise ConfigurationError(f"granularity {granularity_minutes} min does not divide a day")
    return MINUTES_PER_DAY // granularity_minutes


@dataclass(frozen=True)
class EmbeddingConfig:
    input_len: int = 12
    num_nodes: int = 1
    num_features: int = 1
    d_f: int = 24
    d_a: int = 80
    slots_per_day: int = 288
    days_per_week: int = 7

    def __post_init__(self):
        for name in ("input_len", "num_nodes", "num_features", "d_f", "d_a", "slots_per_day"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.days_per_week != 7:
            raise ConfigurationError("day-of-week vocabulary is fixed at 7")

    @property
    def d_h(self) -> int:
        return 3 * self.d_f + self.d_a


class EmbeddingTables:
    """Learnable arrays of the embedding layer."""

    def __init__(self, cfg: EmbeddingConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d, d_f = cfg.num_features, cfg.d_f
        limit = 1.0 / np.sqrt(d)
        self.W_feat = Tensor(rng.uniform(-limit, limit, (d, d_f)), True, dtype, "W_feat")
        self.b_feat = Tensor(np.zeros(d_f), True, dtype, "b_feat")
        self.T_w = Tensor(rng.normal(0.0, 0.02, (cfg.days_per_week, d_f)), True, dtype, "T_w")
        self.T_d = Tensor(rng.normal(0.0, 0.02, (cfg.slots_per_day, d_f)), True, dtype, "T_d")
        adaptive = rng.uniform(-0.5, 0.5, (cfg.input_len, cfg.num_nodes, cfg.d_a)) / np.sqrt(cfg.d_a)
        self.X_a = Tensor(adaptive, True, dtype, "X_a")

    def parameters(self) -> dict:
        return {t.name: t for t in (self.W_feat, self.b_feat, self.T_w, self.T_d, self.X_a)}


def embed_features(x: Tensor, tables: EmbeddingTables) -> Tensor:
    """Affine map of the raw feature axis: ``x @ W_feat + b_feat``."""
    if x.shape[-1] != tables.W_feat.shape[0]:
        raise ShapeError(f"feature count {x.shape[-1]} != configured {tables.W_feat.shape[0]}")
    return ad.matmul(x, tables.W_feat) + tables.b_feat


def embed_periodicity(day_of_week, time_of_day, tables: EmbeddingTables,
                      num_nodes: int | None = None) -> Tensor:
    """Concatenate day-of-week and time-of-day rows and broadcast over nodes.

    ``day_of_week`` and ``time_of_day`` are integer arrays of shape ``(..., m)``;
    the result has shape ``(..., m, N, 2 * d_f)``.
    """
    dow = np.asarray(day_of_week)
    tod = np.asarray(time_of_day)
    if dow.shape != tod.shape:
        raise ShapeError(f"calendar index shapes differ: {dow.shape} vs {tod.shape}")
    n = tables.cfg.num_nodes if num_nodes is None else num_nodes
    rows = ad.concat([ad.take(tables.T_w, dow), ad.take(tables.T_d, tod)], axis=-1)
    m, width = rows.shape[-2], rows.shape[-1]
    rows = rows.reshape(dow.shape[:-1] + (m, 1, width))
    return ad.broadcast_to(rows, dow.shape[:-1] + (m, n, width))


def assemble_hidden(x_f: Tensor, x_p: Tensor, x_a: Tensor) -> Tensor:
    """Concatenate feature, periodicity and adaptive parts along the last axis.

    ``x_a`` may lack the batch axes of the other two; it is then shared across
    the batch.
    """
    d_f = x_f.shape[-1]
    if x_p.shape[-1] != 2 * d_f:
        raise ShapeError(f"periodicity width {x_p.shape[-1]} != 2 * {d_f}")
    if x_f.shape[:-1] != x_p.shape[:-1]:
        raise ShapeError(f"leading extents differ: {x_f.shape} vs {x_p.shape}")
    lead = x_f.shape[:-1]
    if x_a.shape[:-1] != lead:
        if lead[len(lead) - (x_a.ndim - 1):] != x_a.shape[:-1]:
            raise ShapeError(f"adaptive embedding {x_a.shape} does not fit {lead}")
        x_a = ad.broadcast_to(x_a, lead + x_a.shape[-1:])
    return ad.concat([x_f, x_p, x_a], axis=-1)


def embed(x: Tensor, day_of_week, time_of_day, tables: EmbeddingTables) -> Tensor:
    """Hidden representation ``Z`` of shape ``(..., m, N, d_h)``."""
    cfg = tables.cfg
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=tables.W_feat.dtype)
    if x.shape[-3:] != (cfg.input_len, cfg.num_nodes, cfg.num_features):
        raise ShapeError(f"window shape {x.shape[-3:]} != "
                         f"({cfg.input_len}, {cfg.num_nodes}, {cfg.num_features})")
    z = assemble_hidden(embed_features(x, tables),
                        embed_periodicity(day_of_week, time_of_day, tables),
                        tables.X_a)
    assert z.shape[-1] == cfg.d_h == 3 * cfg.d_f + cfg.d_a
    return z
