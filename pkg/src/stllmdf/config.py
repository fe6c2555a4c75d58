"""Run configuration: ``key = value`` text files, validation and stable hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime
from pathlib import Path

from .data import MISSING_GRID, SplitSpec, WindowSpec
from .diffusion import DiffusionSchedule, ReverseSamplerConfig, canonical_mode
from .embedding import slots_per_day
from .errors import ConfigurationError
from .model import ModelConfig

DATA_KEYS = ("dataset", "num_features", "granularity", "start", "synthetic_steps", "synthetic_nodes",
             "synthetic_noise", "synthetic_missing", "input_len", "output_len", "stride",
             "split_ratios", "profile", "seed")
DENOISER_KEYS = DATA_KEYS + ("beta_min", "beta_max", "diffusion_steps", "denoiser_hidden",
                             "denoiser_width", "timestep_dim", "max_period", "denoiser_epochs",
                             "denoiser_lr", "batch_size")
# keys that only affect evaluation; a trained bundle stays valid when they change
EVAL_KEYS = ("missing_ratio", "missing_grid", "horizons", "mape_floor", "hi_mode", "sampler",
             "ddim_steps", "eta", "delta", "recovery_samples")


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = "synthetic"
    num_features: int = 1
    granularity: int = 5
    start: str = "2024-01-01T00:00:00"
    synthetic_steps: int = 2000
    synthetic_nodes: int = 4
    synthetic_noise: float = 0.5
    synthetic_missing: float = 0.0
    input_len: int = 12
    output_len: int = 12
    stride: int = 1
    split_ratios: tuple = (0.7, 0.1, 0.2)
    # embedding
    d_f: int = 24
    d_a: int = 80
    slots_per_day: int = 0          # 0: derived from granularity
    # diffusion
    beta_min: float = 1e-4
    beta_max: float = 0.02
    diffusion_steps: int = 1000
    sampler: str = "ddim"
    ddim_steps: int = 50
    eta: float = 0.0
    delta: float = -1.0             # negative: posterior std of each step
    denoiser_hidden: int = 32
    denoiser_width: int = 5
    timestep_dim: int = 32
    max_period: float = 10000.0
    denoiser_epochs: int = 60
    denoiser_lr: float = 2e-3
    recovery_samples: int = 16
    # transformer
    layers: int = 4
    heads: int = 8
    d_ff_ratio: int = 4
    attention_layout: str = "joint"
    norm_eps: float = 1e-6
    freeze_llm: bool = False
    freeze_embedding: bool = False
    freeze_head: bool = False
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    profile: str = "f32"
    # ablations
    enable_denoise: bool = True
    enable_llm_block: bool = True
    # evaluation
    missing_ratio: float = 0.0
    missing_grid: tuple = MISSING_GRID
    horizons: tuple = (2, 5, 11)
    mape_floor: float = 1e-3
    hi_mode: str = "last"

    def __post_init__(self):
        try:
            datetime.fromisoformat(self.start)
        except ValueError:
            raise ConfigurationError(f"start: not an ISO timestamp: {self.start!r}") from None
        canonical_mode(self.sampler)
        slots_per_day(self.granularity)
        SplitSpec(self.split_ratios)
        for p in self.missing_grid:
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"missing_grid value {p} outside [0, 1]")
        if not 0.0 <= self.missing_ratio <= 1.0:
            raise ConfigurationError(f"missing_ratio {self.missing_ratio} outside [0, 1]")
        if self.hi_mode not in ("last", "daily"):
            raise ConfigurationError(f"hi_mode must be 'last' or 'daily', got {self.hi_mode!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.denoiser_epochs < 0:
            raise ConfigurationError("batch_size must be positive and epoch counts non-negative")
        self.model_config()

    # ---------------------------------------------------------------- views
    @property
    def is_synthetic(self) -> bool:
        return self.dataset == "synthetic"

    @property
    def start_time(self) -> datetime:
        return datetime.fromisoformat(self.start)

    @property
    def vocab_slots(self) -> int:
        return self.slots_per_day or slots_per_day(self.granularity)

    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.input_len, self.output_len, self.stride)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.split_ratios)

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.diffusion_steps, self.beta_min, self.beta_max)

    def sampler_config(self, seed: int | None = None) -> ReverseSamplerConfig:
        return ReverseSamplerConfig(self.sampler, self.eta, None if self.delta < 0 else self.delta,
                                    self.seed if seed is None else seed)

    def model_config(self, num_nodes: int | None = None) -> ModelConfig:
        return ModelConfig(self.input_len, self.output_len,
                           self.synthetic_nodes if num_nodes is None else num_nodes,
                           self.num_features, self.d_f, self.d_a, self.vocab_slots, self.layers,
                           self.heads, self.d_ff_ratio, self.attention_layout, self.norm_eps,
                           self.enable_llm_block, self.profile)

    # -------------------------------------------------------------- hashing
    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def hash(self) -> str:
        return _digest(self.to_dict())

    def data_hash(self) -> str:
        d = self.to_dict()
        return _digest({k: d[k] for k in DATA_KEYS})

    def denoiser_hash(self) -> str:
        d = self.to_dict()
        return _digest({k: d[k] for k in DENOISER_KEYS})

    def train_hash(self) -> str:
        """Hash of everything that shapes a trained forecaster."""
        return _digest({k: v for k, v in self.to_dict().items() if k not in EVAL_KEYS})

    def validate_paths(self) -> None:
        if not self.is_synthetic and not Path(self.dataset).exists():
            raise ConfigurationError(f"dataset: file not found: {self.dataset}")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        kind = int if default and all(isinstance(x, int) for x in default) else float
        return lambda s: tuple(kind(x) for x in s.replace(":", ",").split(",") if x.strip())
    return lambda s: s.strip()


def parse_config_text(text: str, source: str = "<config>") -> dict:
    known = {f.name: f.default for f in fields(RunConfig)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"{source}:{n}: unknown key {key!r}")
        try:
            out[key] = _converter(known[key])(value)
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{n}: {key}: {exc}") from None
    return out


def load_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(), str(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
