"""Denoising diffusion: schedule, noise predictor, training loss and reverse samplers.

Step indices run ``1..S``; index 0 stands for clean data with cumulative
retention 1.  Reverse sampling supports three update rules:

``standard-ddpm``
    posterior-mean update with variance ``beta_s (1 - abar_{s-1}) / (1 - abar_s)``.
``paper-literal``
    ``(x - (1 - a_s) / sqrt(1 - a_s**2) * eps) / sqrt(a_s) + delta * z``.
``ddim``
    x0-prediction update over a possibly sub-sampled step sequence, with
    ``eta`` scaling the injected noise (``eta = 0`` is deterministic).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError

MODES = ("standard-ddpm", "paper-literal", "ddim")
_MODE_ALIASES = {"ddpm": "standard-ddpm", "standard": "standard-ddpm",
                 "paper_literal": "paper-literal", "paper": "paper-literal"}


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigurationError(f"unknown sampler mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear variance schedule.  Arrays are indexed by step, entry 0 is clean data."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, steps: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02):
        if steps < 1:
            raise ConfigurationError("diffusion needs at least one step")
        if not 0 < beta_min <= beta_max < 1:
            raise ConfigurationError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
        betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, steps)])
        return cls.from_betas(betas)

    @classmethod
    def from_betas(cls, betas):
        betas = np.asarray(betas, dtype=np.float64)
        alphas = 1.0 - betas
        return cls(betas, alphas, np.cumprod(alphas))

    @property
    def steps(self) -> int:
        return len(self.betas) - 1

    def check_step(self, s) -> None:
        s = np.asarray(s)
        if np.any(s < 1) or np.any(s > self.steps):
            raise IndexError(f"diffusion step out of range 1..{self.steps}: {s}")

    def posterior_std(self, s: int) -> float:
        return float(np.sqrt(self.betas[s] * (1 - self.alpha_bars[s - 1]) / (1 - self.alpha_bars[s])))


def timestep_embed(steps, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding: cosines in the first half, sines in the second.

    Frequencies are ``exp(-k ln(max_period) / (dim / 2))`` for ``k < dim / 2``.
    ``steps`` may be a scalar or an array; fractional steps are allowed.
    """
    if dim % 2:
        raise ConfigurationError(f"timestep embedding width must be even, got {dim}")
    if max_period <= 1:
        raise ConfigurationError("max_period must exceed 1")
    steps = np.asarray(steps, dtype=np.float64)
    if np.any(steps < 0):
        raise ValueError("diffusion step must be non-negative")
    half = dim // 2
    freqs = np.exp(-np.arange(half) * np.log(max_period) / half)
    args = steps[..., None] * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class NoisePredictor:
    """``conv(silu(conv(x) + proj(emb(s))))`` along time, per node.

    Input and output are ``(B, m, N, d)``.  ``frozen`` toggles gradient
    tracking of every parameter.
    """

    def __init__(self, num_features: int, hidden: int = 32, width: int = 3,
                 emb_dim: int = 32, max_period: float = 10000.0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if width % 2 == 0:
            raise ConfigurationError(f"kernel width must be odd, got {width}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_features, self.hidden, self.width = num_features, hidden, width
        self.emb_dim, self.max_period = emb_dim, max_period

        def init(shape, fan_in, name):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape), True, dtype, name)

        self.conv_in = init((width, num_features, hidden), width * num_features, "conv_in")
        self.b_in = Tensor(np.zeros(hidden), True, dtype, "b_in")
        self.W_emb = init((emb_dim, hidden), emb_dim, "W_emb")
        self.b_emb = Tensor(np.zeros(hidden), True, dtype, "b_emb")
        self.conv_out = init((width, hidden, num_features), width * hidden, "conv_out")
        self.b_out = Tensor(np.zeros(num_features), True, dtype, "b_out")
        self._frozen = False

    def parameters(self) -> dict:
        return {t.name: t for t in (self.conv_in, self.b_in, self.W_emb, self.b_emb,
                                    self.conv_out, self.b_out)}

    @property
    def frozen(self) -> bool:
        return self._frozen

    def set_frozen(self, flag: bool = True) -> "NoisePredictor":
        self._frozen = bool(flag)
        for p in self.parameters().values():
            p.requires_grad = not flag
        return self

    def __call__(self, x, steps) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.conv_in.dtype)
        if x.ndim != 4 or x.shape[-1] != self.num_features:
            raise ShapeError(f"noise predictor expects (B, m, N, {self.num_features}), got {x.shape}")
        steps = np.broadcast_to(np.asarray(steps), (x.shape[0],))
        temb = Tensor(timestep_embed(steps, self.emb_dim, self.max_period), dtype=x.dtype)
        proj = ad.matmul(temb, self.W_emb) + self.b_emb
        h = ad.conv_time(x, self.conv_in) + self.b_in
        h = h + proj.reshape(x.shape[0], 1, 1, self.hidden)
        return ad.conv_time(ad.silu(h), self.conv_out) + self.b_out

    def predict(self, x: np.ndarray, steps) -> np.ndarray:
        with ad.no_grad():
            return self(Tensor(x, dtype=self.conv_in.dtype), steps).data

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, arrays: dict) -> None:
        for k, p in self.parameters().items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: stored shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=p.dtype)


def forward_noise(x0, s, schedule: DiffusionSchedule, noise):
    """Closed-form marginal ``sqrt(abar_s) x0 + sqrt(1 - abar_s) eps``.

    ``s`` is a scalar or one step per leading batch entry.
    """
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != data shape {x0.shape}")
    schedule.check_step(s)
    ab = schedule.alpha_bars[np.asarray(s)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise).astype(x0.dtype, copy=False)


def forward_noise_stepwise(x0, s: int, schedule: DiffusionSchedule, rng: np.random.Generator):
    """Iterate ``x_u = sqrt(a_u) x_{u-1} + sqrt(1 - a_u) eps_u`` for ``u = 1..s``."""
    schedule.check_step(s)
    x = np.array(x0, dtype=np.float64)
    for u in range(1, s + 1):
        x = np.sqrt(schedule.alphas[u]) * x + np.sqrt(1 - schedule.alphas[u]) * rng.standard_normal(x.shape)
    return x


def ddpm_loss(x0, predictor, schedule: DiffusionSchedule, rng: np.random.Generator | None = None,
              steps=None, noise=None, mask=None) -> Tensor:
    """Mean squared noise-prediction error over a batch ``x0`` of shape ``(B, ...)``.

    Steps are drawn uniformly from ``1..S`` per sample and noise per element
    unless given explicitly.  With ``mask``, only observed entries count.
    """
    x0 = np.asarray(x0)
    if rng is None and (steps is None or noise is None):
        raise ValueError("ddpm_loss needs an rng unless steps and noise are both given")
    if steps is None:
        steps = rng.integers(1, schedule.steps + 1, size=x0.shape[0])
    if noise is None:
        noise = rng.standard_normal(x0.shape).astype(x0.dtype)
    steps = np.asarray(steps)
    x_s = forward_noise(x0, steps, schedule, noise)
    pred = predictor(Tensor(x_s, dtype=x0.dtype), steps)
    diff = Tensor(noise, dtype=pred.dtype) - pred
    sq = diff * diff
    if mask is None:
        return sq.mean()
    m = np.asarray(mask, dtype=pred.dtype)
    return (sq * m).sum() / max(float(m.sum()), 1.0)


@dataclass(frozen=True)
class ReverseSamplerConfig:
    mode: str = "standard-ddpm"
    eta: float = 0.0
    delta: float | None = None  # None: the posterior std of the step
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")
        if self.delta is not None and self.delta < 0:
            raise ConfigurationError(f"delta must be non-negative, got {self.delta}")


def reverse_update(x_s, eps, s: int, schedule: DiffusionSchedule, cfg: ReverseSamplerConfig,
                   noise=None, prev: int | None = None):
    """One reverse update given the predicted noise ``eps``.

    ``noise`` is the standard normal draw ``z`` (ignored when the update is
    deterministic).  ``prev`` is the target step, only meaningful for ddim.
    """
    schedule.check_step(s)
    x_s = np.asarray(x_s)
    prev = s - 1 if prev is None else prev
    if cfg.mode != "ddim" and prev != s - 1:
        raise ConfigurationError(f"{cfg.mode} updates move one step at a time")
    if not 0 <= prev < s:
        raise IndexError(f"previous step {prev} not in [0, {s})")
    a, ab, beta = schedule.alphas[s], schedule.alpha_bars[s], schedule.betas[s]
    ab_prev = schedule.alpha_bars[prev]
    if cfg.mode == "standard-ddpm":
        out = (x_s - beta / np.sqrt(1 - ab) * eps) / np.sqrt(a)
        sigma = schedule.posterior_std(s)
    elif cfg.mode == "paper-literal":
        out = (x_s - (1 - a) / np.sqrt(1 - a * a) * eps) / np.sqrt(a)
        sigma = schedule.posterior_std(s) if cfg.delta is None else cfg.delta
    else:
        x0_hat = (x_s - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
        sigma = cfg.eta * np.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
        out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1 - ab_prev - sigma ** 2, 0.0)) * eps
    if sigma > 0 and noise is not None:
        out = out + sigma * noise
    return out.astype(x_s.dtype, copy=False)


def reverse_step(x_s, s: int, predictor, schedule: DiffusionSchedule, cfg: ReverseSamplerConfig,
                 rng: np.random.Generator | None = None, prev: int | None = None):
    """Predict the noise in ``x_s`` and take one reverse update to ``prev``."""
    x_s = np.asarray(x_s)
    eps = predictor.predict(x_s, np.full(x_s.shape[0], s))
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    noise = rng.standard_normal(x_s.shape).astype(x_s.dtype)
    return reverse_update(x_s, eps, s, schedule, cfg, noise, prev)


def step_sequence(schedule: DiffusionSchedule, cfg: ReverseSamplerConfig,
                  num_steps: int | None = None) -> list:
    """Descending ``(s, prev)`` pairs visited by a reverse chain from ``S`` to 0."""
    S = schedule.steps
    if cfg.mode != "ddim" or num_steps is None or num_steps >= S:
        seq = list(range(S, 0, -1))
    else:
        if num_steps < 1:
            raise ConfigurationError("ddim needs at least one step")
        seq = sorted({int(v) for v in np.round(np.linspace(1, S, num_steps))}, reverse=True)
    return list(zip(seq, seq[1:] + [0]))


def _sample_streams(seed: int, ids) -> list:
    return [np.random.default_rng([seed, int(i)]) for i in ids]


def _normal(streams, shape, dtype):
    return np.stack([r.standard_normal(shape) for r in streams]).astype(dtype)


def sample(predictor, shape, schedule: DiffusionSchedule, cfg: ReverseSamplerConfig,
           num_steps: int | None = None, sample_ids=None, dtype=np.float64):
    """Unconditional reverse chain from pure noise; ``shape`` includes the batch axis."""
    ids = range(shape[0]) if sample_ids is None else sample_ids
    streams = _sample_streams(cfg.seed, ids)
    x = _normal(streams, shape[1:], dtype)
    for s, prev in step_sequence(schedule, cfg, num_steps):
        eps = predictor.predict(x, np.full(shape[0], s)).astype(dtype)
        noise = _normal(streams, shape[1:], dtype)
        x = reverse_update(x, eps, s, schedule, cfg, noise, prev)
    return x


@dataclass
class RecoveryResult:
    values: np.ndarray
    unconditional: bool = False
    recovered: np.ndarray = field(default=None)  # indices of samples that went through the chain


def recover_missing(x_obs, mask, predictor, schedule: DiffusionSchedule, cfg: ReverseSamplerConfig,
                    num_steps: int | None = None, num_samples: int = 1, sample_ids=None) -> RecoveryResult:
    """Fill unobserved entries of ``x_obs`` (shape ``(B, m, N, d)``) by reverse diffusion.

    After every update the observed coordinates are replaced with the ground
    truth noised to the new step, so the final output equals ``x_obs`` exactly
    where ``mask == 1``.  Samples without missing entries skip the chain.
    ``num_samples`` chains are averaged per sample.
    """
    x_obs = np.asarray(x_obs)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != x_obs.shape:
        raise ShapeError(f"mask shape {mask.shape} != data shape {x_obs.shape}")
    unconditional = not mask.any()
    if unconditional:
        warnings.warn("recover_missing: mask has no observed entries; sampling unconditionally")
    out = x_obs.copy()
    todo = np.flatnonzero(~mask.reshape(len(mask), -1).all(axis=1))
    if len(todo) == 0:
        return RecoveryResult(out, unconditional, todo)
    ids = np.arange(len(x_obs)) if sample_ids is None else np.asarray(sample_ids)
    x0 = x_obs[todo].astype(np.float64)
    keep = mask[todo]
    total = np.zeros_like(x0)
    steps = step_sequence(schedule, cfg, num_steps)
    for k in range(num_samples):
        streams = _sample_streams(cfg.seed, [ids[i] * num_samples + k for i in todo])
        x = _normal(streams, x0.shape[1:], np.float64)
        for s, prev in steps:
            eps = predictor.predict(x, np.full(len(todo), s)).astype(np.float64)
            x = reverse_update(x, eps, s, schedule, cfg, _normal(streams, x0.shape[1:], np.float64), prev)
            if prev > 0:
                known = forward_noise(x0, prev, schedule, _normal(streams, x0.shape[1:], np.float64))
            else:
                known = x0
            x = np.where(keep, known, x)
        total += x
    filled = (total / num_samples).astype(x_obs.dtype)
    out[todo] = np.where(keep, x_obs[todo], filled)
    return RecoveryResult(out, unconditional, todo)


def mean_impute(x_obs, mask):
    """Replace unobserved entries by the window mean of observed entries per node and feature."""
    x_obs = np.asarray(x_obs)
    m = np.asarray(mask).astype(x_obs.dtype)
    count = m.sum(axis=-3, keepdims=True)
    means = (x_obs * m).sum(axis=-3, keepdims=True) / np.maximum(count, 1)
    return np.where(m.astype(bool), x_obs, np.broadcast_to(means, x_obs.shape))
