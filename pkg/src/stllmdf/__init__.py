"""Spatio-temporal forecasting with a diffusion denoiser and transformer blocks, in numpy."""
from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .config import RunConfig, load_config
from .data import (CorruptionSpec, Normalizer, SeriesSource, SplitSpec, WindowedDataset, WindowSpec,
                   build_windows, inject_missing, split_chronological, synthetic_series)
from .diffusion import DiffusionSchedule, NoisePredictor, ReverseSamplerConfig, recover_missing
from .embedding import EmbeddingConfig, EmbeddingTables, embed
from .metrics import MetricsReport, hi_baseline, horizon_report, mae, mape, rmse
from .model import Adam, Forecaster, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_diff_check", "no_grad", "RunConfig", "load_config",
    "CorruptionSpec", "Normalizer", "SeriesSource", "SplitSpec", "WindowedDataset", "WindowSpec",
    "build_windows", "inject_missing", "split_chronological", "synthetic_series",
    "DiffusionSchedule", "NoisePredictor", "ReverseSamplerConfig", "recover_missing",
    "EmbeddingConfig", "EmbeddingTables", "embed", "MetricsReport", "hi_baseline",
    "horizon_report", "mae", "mape", "rmse", "Adam", "Forecaster", "ModelConfig",
]
