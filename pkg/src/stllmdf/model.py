"""The forecaster (embedding -> transformer stack -> head) and its optimizer."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import EmbeddingConfig, EmbeddingTables, embed
from .errors import ConfigurationError, ShapeError
from .transformer import LAYOUTS, BlockParams, HeadParams, predict_head, set_frozen, stllm_forward


@dataclass(frozen=True)
class ModelConfig:
    input_len: int = 12
    output_len: int = 12
    num_nodes: int = 4
    num_features: int = 1
    d_f: int = 24
    d_a: int = 80
    slots_per_day: int = 288
    layers: int = 4
    heads: int = 8
    d_ff_ratio: int = 4
    attention_layout: str = "joint"
    norm_eps: float = 1e-6
    enable_llm_block: bool = True
    profile: str = "f32"

    def __post_init__(self):
        if self.attention_layout not in LAYOUTS:
            raise ConfigurationError(f"attention_layout must be one of {LAYOUTS}")
        if self.enable_llm_block and (self.layers < 1 or self.d_h % self.heads):
            raise ConfigurationError(f"need layers >= 1 and heads dividing d_h={self.d_h}")
        ad.dtype_for(self.profile)

    @property
    def d_h(self) -> int:
        return 3 * self.d_f + self.d_a

    def embedding_config(self) -> EmbeddingConfig:
        return EmbeddingConfig(self.input_len, self.num_nodes, self.num_features,
                               self.d_f, self.d_a, self.slots_per_day)


class Forecaster:
    """Maps ``(B, m, N, d)`` windows plus calendar indices to ``(B, z, N, d)`` forecasts."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = ad.dtype_for(cfg.profile)
        rng = np.random.default_rng(seed)
        ecfg = cfg.embedding_config()
        if ecfg.d_h != 3 * cfg.d_f + cfg.d_a:
            raise ConfigurationError("hidden width must equal 3 * d_f + d_a")
        self.embedding = EmbeddingTables(ecfg, rng, dtype)
        count = 0
        if cfg.enable_llm_block:
            count = cfg.layers * (2 if cfg.attention_layout == "factorized" else 1)
        self.blocks = [BlockParams(cfg.d_h, cfg.heads, cfg.d_ff_ratio * cfg.d_h, rng, dtype)
                       for _ in range(count)]
        self.head = HeadParams(cfg.input_len, cfg.d_h, cfg.output_len, cfg.num_features, rng, dtype)

    def parameters(self) -> dict:
        out = {f"embedding.{k}": v for k, v in self.embedding.parameters().items()}
        for i, b in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in b.parameters().items()})
        out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return out

    def freeze(self, part: str, flag: bool = True) -> None:
        """Freeze ``llm`` (all blocks), ``embedding`` or ``head``."""
        if part == "llm":
            if self.blocks:
                set_frozen(self.blocks, flag)
        elif part == "embedding":
            for p in self.embedding.parameters().values():
                p.requires_grad = not flag
        elif part == "head":
            set_frozen(self.head, flag)
        else:
            raise ConfigurationError(f"unknown model part {part!r}")

    def trainable(self) -> dict:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def __call__(self, x, day_of_week, time_of_day) -> Tensor:
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.head.W.dtype)
        if x.ndim != 4 or x.shape[1:] != (cfg.input_len, cfg.num_nodes, cfg.num_features):
            raise ShapeError(f"expected (batch, {cfg.input_len}, {cfg.num_nodes}, {cfg.num_features}), "
                             f"got {x.shape}")
        z = embed(x, day_of_week, time_of_day, self.embedding)
        if self.blocks:
            z = stllm_forward(z, self.blocks, cfg.norm_eps, cfg.attention_layout)
        return predict_head(z, self.head)

    def predict(self, x, day_of_week, time_of_day, batch_size: int = 64) -> np.ndarray:
        outs = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                sl = slice(i, i + batch_size)
                outs.append(self(x[sl], day_of_week[sl], time_of_day[sl]).data)
        return np.concatenate(outs)

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, arrays: dict) -> None:
        for k, p in self.parameters().items():
            if k not in arrays:
                raise KeyError(f"parameter {k} missing from state")
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: stored shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=p.dtype)

    def config_dict(self) -> dict:
        return asdict(self.cfg)


class Adam:
    """Adaptive-moment gradient descent over a name -> tensor mapping.

    Tensors that are frozen, or absent from the gradient map, are skipped.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None or not p.requires_grad:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)
