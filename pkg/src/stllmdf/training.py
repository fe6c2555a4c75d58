"""Training loops for the noise predictor and the forecaster, and the inference path."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import DiffusionSchedule, NoisePredictor, ReverseSamplerConfig, ddpm_loss, recover_missing
from .model import Adam, Forecaster

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; parameters were restored to the last good state."""

    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)     # one dict per epoch
    best_epoch: int = 0
    best_val_mae: float = float("inf")
    steps: int = 0


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_denoiser(predictor: NoisePredictor, inputs, mask, schedule: DiffusionSchedule, *,
                   epochs: int = 20, batch_size: int = 16, lr: float = 2e-3, seed: int = 0,
                   max_steps: int | None = None) -> list:
    """Minimise the noise-prediction loss on observed entries of ``inputs``.

    Returns one ``{"epoch", "loss"}`` row per epoch (mean batch loss).  The
    predictor is frozen on return.
    """
    predictor.set_frozen(False)
    params = predictor.parameters()
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    curve, steps = [], 0
    good = predictor.state()
    for epoch in range(1, epochs + 1):
        losses = []
        for idx in _batches(len(inputs), batch_size, rng):
            loss = ddpm_loss(inputs[idx], predictor, schedule, rng, mask=mask[idx])
            if not np.isfinite(loss.data):
                predictor.load_state(good)
                predictor.set_frozen(True)
                raise TrainingDiverged(f"denoiser loss became {loss.item()} at epoch {epoch}", curve)
            opt.step(ad.backward(loss))
            losses.append(loss.item())
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        good = predictor.state()
        curve.append({"epoch": epoch, "loss": float(np.mean(losses)), "steps": steps})
        log.info("denoiser epoch %d loss %.6f", epoch, curve[-1]["loss"])
        if max_steps is not None and steps >= max_steps:
            break
    predictor.set_frozen(True)
    return curve


def forecast_loss(model: Forecaster, x, dow, tod, y) -> Tensor:
    """Mean absolute error in normalized space."""
    pred = model(x, dow, tod)
    return ad.tabs(pred - Tensor(y, dtype=pred.dtype)).mean()


def evaluate_mae(model: Forecaster, inputs, dow, tod, targets, batch_size: int = 64) -> float:
    pred = model.predict(inputs, dow, tod, batch_size)
    return float(np.mean(np.abs(pred.astype(np.float64) - targets)))


def train_forecaster(model: Forecaster, train, val, *, epochs: int = 50, batch_size: int = 16,
                     lr: float = 1e-3, weight_decay: float = 0.0, patience: int = 10, seed: int = 0,
                     train_inputs=None, val_inputs=None, max_steps: int | None = None) -> TrainResult:
    """Adam on the L1 forecast loss with early stopping on validation MAE.

    ``train_inputs`` / ``val_inputs`` replace the datasets' inputs (for example
    after missing-value recovery).  The best-validation parameters are
    restored at the end.
    """
    xs = train.inputs if train_inputs is None else train_inputs
    xv = val.inputs if val_inputs is None else val_inputs
    opt = Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    result = TrainResult()
    best_state = model.state()
    trainable = bool(model.trainable())
    stale = 0
    for epoch in range(1, epochs + 1):
        losses = []
        for idx in _batches(len(xs), batch_size, rng):
            if trainable:
                loss = forecast_loss(model, xs[idx], train.day_of_week[idx], train.time_of_day[idx],
                                     train.targets[idx])
                if not np.isfinite(loss.data):
                    model.load_state(best_state)
                    raise TrainingDiverged(f"forecast loss became {loss.item()} at epoch {epoch}",
                                           result.curve)
                opt.step(ad.backward(loss))
            else:
                with ad.no_grad():
                    loss = forecast_loss(model, xs[idx], train.day_of_week[idx],
                                         train.time_of_day[idx], train.targets[idx])
            losses.append(loss.item())
            result.steps += 1
            if max_steps is not None and result.steps >= max_steps:
                break
        val_mae = evaluate_mae(model, xv, val.day_of_week, val.time_of_day, val.targets)
        result.curve.append({"epoch": epoch, "train_mae": float(np.mean(losses)),
                             "val_mae": val_mae, "steps": result.steps})
        log.info("epoch %d train_mae %.6f val_mae %.6f", epoch, result.curve[-1]["train_mae"], val_mae)
        if val_mae < result.best_val_mae:
            result.best_val_mae, result.best_epoch = val_mae, epoch
            best_state = model.state()
            stale = 0
        else:
            stale += 1
        if max_steps is not None and result.steps >= max_steps:
            break
        if stale >= patience:
            log.info("early stop after epoch %d (best %d)", epoch, result.best_epoch)
            break
    if result.curve:
        model.load_state(best_state)
    return result


def recover_inputs(ds, denoiser: NoisePredictor, schedule: DiffusionSchedule,
                   sampler: ReverseSamplerConfig, num_steps: int | None = 50,
                   num_samples: int = 1, inputs=None, mask=None) -> np.ndarray:
    """Missing-value recovery for every window of ``ds`` (noise streams keyed by window offset)."""
    x = ds.inputs if inputs is None else inputs
    mk = ds.mask if mask is None else mask
    return recover_missing(x, mk, denoiser, schedule, sampler, num_steps=num_steps,
                           num_samples=num_samples, sample_ids=ds.offsets).values
