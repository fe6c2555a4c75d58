"""Transformer stack over space-time tokens, plus the regression head.

Each block applies, in order::

    x1 = rmsnorm(multi_head_attention(x)) + x
    x2 = ffn(rmsnorm(x1)) + x1

with ``ffn(x) = relu(x W1 + b1) W2 + b2``.  Attention is unmasked.  In the
``joint`` layout every (timestep, node) pair is one token; in the
``factorized`` layout a temporal stack (tokens = timesteps of one node) is
followed by a spatial stack (tokens = nodes at one timestep).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError

LAYOUTS = ("joint", "factorized")


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    return ad.rmsnorm(x, gamma, eps)


class BlockParams:
    """Weights of one block.  Per-head projections are packed column-wise:
    head ``i`` uses columns ``i * d_k : (i + 1) * d_k`` of ``Wq``, ``Wk`` and ``Wv``."""

    def __init__(self, d_h: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dtype=np.float32, std: float = 0.02):
        if d_h % heads:
            raise ConfigurationError(f"hidden width {d_h} is not divisible by {heads} heads")
        self.d_h, self.heads, self.d_ff = d_h, heads, d_ff

        def normal(shape, name):
            return Tensor(rng.normal(0.0, std, shape), True, dtype, name)

        def const(shape, value, name):
            return Tensor(np.full(shape, value), True, dtype, name)

        self.Wq = normal((d_h, d_h), "Wq")
        self.Wk = normal((d_h, d_h), "Wk")
        self.Wv = normal((d_h, d_h), "Wv")
        self.Wo = normal((d_h, d_h), "Wo")
        self.W1 = normal((d_h, d_ff), "W1")
        self.b1 = const((d_ff,), 0.0, "b1")
        self.W2 = normal((d_ff, d_h), "W2")
        self.b2 = const((d_h,), 0.0, "b2")
        self.g_attn = const((d_h,), 1.0, "g_attn")
        self.g_ffn = const((d_h,), 1.0, "g_ffn")
        self._frozen = False

    @property
    def d_k(self) -> int:
        return self.d_h // self.heads

    def parameters(self) -> dict:
        return {t.name: t for t in (self.Wq, self.Wk, self.Wv, self.Wo, self.W1, self.b1,
                                    self.W2, self.b2, self.g_attn, self.g_ffn)}

    @property
    def frozen(self) -> bool:
        return self._frozen


class HeadParams:
    """Fully connected map from a node's flattened ``m x d_h`` block to ``z x d``."""

    def __init__(self, input_len: int, d_h: int, output_len: int, num_features: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.input_len, self.d_h = input_len, d_h
        self.output_len, self.num_features = output_len, num_features
        fan_in = input_len * d_h
        bound = 1.0 / np.sqrt(fan_in)
        self.W = Tensor(rng.uniform(-bound, bound, (fan_in, output_len * num_features)), True, dtype, "W")
        self.b = Tensor(np.zeros(output_len * num_features), True, dtype, "b")
        self._frozen = False

    def parameters(self) -> dict:
        return {"W": self.W, "b": self.b}

    @property
    def frozen(self) -> bool:
        return self._frozen


def set_frozen(params, flag: bool = True):
    """Freeze (or thaw) a parameter holder or a list of them.

    Frozen tensors are left out of the trace, so they get no gradient and the
    optimizer never touches them.  The forward computation is unchanged.
    """
    holders = params if isinstance(params, (list, tuple)) else [params]
    for h in holders:
        if hasattr(h, "set_frozen"):
            h.set_frozen(flag)
            continue
        for p in h.parameters().values():
            p.requires_grad = not flag
        h._frozen = bool(flag)
    return params


def multi_head_attention(x: Tensor, params: BlockParams) -> Tensor:
    """Full softmax attention over the token axis of ``x[..., L, d_h]``."""
    if x.shape[-1] != params.d_h:
        raise ShapeError(f"token width {x.shape[-1]} != {params.d_h}")
    lead, L = x.shape[:-2], x.shape[-2]
    h, d_k = params.heads, params.d_k
    nl = len(lead)

    def split(t):
        t = t.reshape(lead + (L, h, d_k))
        return t.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2))

    q = split(ad.matmul(x, params.Wq))
    k = split(ad.matmul(x, params.Wk))
    v = split(ad.matmul(x, params.Wv))
    kt = k.transpose(tuple(range(nl + 1)) + (nl + 2, nl + 1))
    weights = ad.softmax_last(ad.matmul(q, kt) * (1.0 / np.sqrt(d_k)))
    heads = ad.matmul(weights, v)
    merged = heads.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(lead + (L, h * d_k))
    return ad.matmul(merged, params.Wo)


def ffn(x: Tensor, params: BlockParams) -> Tensor:
    if x.shape[-1] != params.W1.shape[0]:
        raise ShapeError(f"ffn input width {x.shape[-1]} != {params.W1.shape[0]}")
    hidden = ad.relu(ad.matmul(x, params.W1) + params.b1)
    return ad.matmul(hidden, params.W2) + params.b2


def block_forward(tokens: Tensor, params: BlockParams, eps: float = 1e-6) -> Tensor:
    """One block on ``tokens[..., L, d_h]``."""
    x1 = rmsnorm(multi_head_attention(tokens, params), params.g_attn, eps) + tokens
    return ffn(rmsnorm(x1, params.g_ffn, eps), params) + x1


def _along_time(z: Tensor, fn) -> Tensor:
    # (..., m, N, d) -> (..., N, m, d), apply, and back
    nl = z.ndim - 3
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return fn(z.transpose(perm)).transpose(perm)


def stllm_forward(z: Tensor, blocks, eps: float = 1e-6, layout: str = "joint") -> Tensor:
    """Apply the block stack to a hidden representation ``z[..., m, N, d_h]``.

    For ``factorized`` the first half of ``blocks`` attends over time and the
    second half over nodes.
    """
    if not blocks:
        raise ConfigurationError("stllm_forward needs at least one block")
    if layout not in LAYOUTS:
        raise ConfigurationError(f"unknown attention layout {layout!r}")
    if z.ndim < 3:
        raise ShapeError(f"expected (..., m, N, d_h), got {z.shape}")
    lead, (m, n, d_h) = z.shape[:-3], z.shape[-3:]
    if layout == "joint":
        x = z.reshape(lead + (m * n, d_h))
        for p in blocks:
            x = block_forward(x, p, eps)
        return x.reshape(z.shape)
    if len(blocks) % 2:
        raise ConfigurationError("factorized layout needs an even number of blocks")
    half = len(blocks) // 2

    def temporal(x):
        for p in blocks[:half]:
            x = block_forward(x, p, eps)
        return x

    x = _along_time(z, temporal)
    for p in blocks[half:]:
        x = block_forward(x, p, eps)
    return x


def predict_head(x: Tensor, head: HeadParams) -> Tensor:
    """Map ``x[..., m, N, d_h]`` to a forecast ``[..., z, N, d]``.

    Each node's ``m x d_h`` block is flattened time-major and mapped affinely.
    """
    if x.shape[-3] != head.input_len or x.shape[-1] != head.d_h:
        raise ShapeError(f"head expects (..., {head.input_len}, N, {head.d_h}), got {x.shape}")
    nl = x.ndim - 3
    lead, n = x.shape[:-3], x.shape[-2]
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    flat = x.transpose(perm).reshape(lead + (n, head.input_len * head.d_h))
    y = ad.matmul(flat, head.W) + head.b
    y = y.reshape(lead + (n, head.output_len, head.num_features))
    return y.transpose(perm)
