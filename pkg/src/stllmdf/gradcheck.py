"""Finite-difference verification of every gradient rule and every model part.

All checks run in the 64-bit profile on small fixed instances with central
differences (step 1e-5).  A check passes when its worst relative error is
below :data:`TOLERANCE`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import DiffusionSchedule, NoisePredictor, ddpm_loss
from .embedding import EmbeddingConfig, EmbeddingTables, embed
from .model import Forecaster, ModelConfig
from .transformer import BlockParams, HeadParams, predict_head, stllm_forward

TOLERANCE = 1e-4
STEP = 1e-5
F64 = np.float64


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)       # check name -> worst relative error
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> list:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list:
        return [f"{'PASS' if v < self.tolerance else 'FAIL'} {k}: max relative error {v:.3e}"
                for k, v in self.errors.items()]


def _param(rng, shape, scale=1.0, offset=0.0):
    return Tensor(offset + scale * rng.standard_normal(shape), True, F64)


def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(x, True, F64)


def _weighted(out: Tensor, rng) -> Tensor:
    return (out * Tensor(rng.standard_normal(out.shape), dtype=F64)).sum()


def op_instances(seed: int = 0) -> dict:
    """``{op name: (loss fn, params)}`` covering every registered gradient rule."""
    rng = np.random.default_rng(seed)
    cases = {}

    def case(name, fn, *params):
        w = rng.standard_normal(fn().shape) if fn().shape else None

        def loss():
            out = fn()
            return (out * Tensor(w, dtype=F64)).sum() if w is not None else out

        cases[name] = (loss, list(params))

    a, b = _param(rng, (3, 4)), _param(rng, (3, 4))
    bias = _param(rng, (4,))
    case("add", lambda: ad.add(a, bias), a, bias)
    case("sub", lambda: ad.sub(a, b), a, b)
    case("mul", lambda: ad.mul(a, b), a, b)
    den = _param(rng, (3, 1), 0.3, 2.0)
    case("div", lambda: ad.div(a, den), a, den)
    case("neg", lambda: ad.neg(a), a)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), True, F64)
    case("power", lambda: ad.power(pos, 3), pos)
    case("exp", lambda: ad.exp(a), a)
    case("log", lambda: ad.log(pos), pos)
    nz = _away_from_zero(rng, (3, 4))
    case("relu", lambda: ad.relu(nz), nz)
    case("silu", lambda: ad.silu(a), a)
    case("abs", lambda: ad.tabs(nz), nz)
    case("sum", lambda: ad.tsum(a, axis=1, keepdims=True), a)
    case("mean", lambda: ad.mean(a, axis=0), a)
    case("reshape", lambda: ad.reshape(a, (2, 6)), a)
    t3 = _param(rng, (2, 3, 4))
    case("transpose", lambda: ad.transpose(t3, (1, 2, 0)), t3)
    case("broadcast_to", lambda: ad.broadcast_to(bias, (2, 3, 4)), bias)
    c = _param(rng, (3, 2))
    case("concat", lambda: ad.concat([a, c], axis=-1), a, c)
    table = _param(rng, (5, 3))
    idx = np.array([[0, 2], [2, 4]])
    case("take", lambda: ad.take(table, idx), table)
    ma, mb = _param(rng, (2, 3, 4)), _param(rng, (4, 2))
    case("matmul", lambda: ad.matmul(ma, mb), ma, mb)
    s = _param(rng, (2, 3, 5))
    case("softmax_last", lambda: ad.softmax_last(s), s)
    gamma = _param(rng, (5,), 0.2, 1.0)
    case("rmsnorm", lambda: ad.rmsnorm(s, gamma, 1e-6), s, gamma)
    x = _param(rng, (2, 5, 2, 3))
    k = _param(rng, (3, 3, 2), 0.5)
    case("conv_time", lambda: ad.conv_time(x, k), x, k)
    return cases


def check_ops(seed: int = 0, ops=None) -> dict:
    out = {}
    for name, (loss, params) in op_instances(seed).items():
        if ops is not None and name not in ops:
            continue
        out[f"op:{name}"] = ad.finite_diff_check(loss, params, h=STEP)
    missing = set(ad.GRADIENT_RULES) - {k[3:] for k in out}
    if ops is None and missing:
        raise RuntimeError(f"no finite-difference instance for ops {sorted(missing)}")
    return out


def check_embedding(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    cfg = EmbeddingConfig(input_len=4, num_nodes=2, num_features=2, d_f=3, d_a=4, slots_per_day=6)
    tables = EmbeddingTables(cfg, rng, F64)
    x = Tensor(rng.standard_normal((2, 4, 2, 2)), dtype=F64)
    dow = rng.integers(0, 7, (2, 4))
    tod = rng.integers(0, 6, (2, 4))
    w = rng.standard_normal((2, 4, 2, cfg.d_h))
    params = list(tables.parameters().values())
    return ad.finite_diff_check(lambda: (embed(x, dow, tod, tables) * w).sum(), params, h=STEP)


def check_denoiser(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    net = NoisePredictor(num_features=2, hidden=4, emb_dim=4, rng=rng, dtype=F64)
    schedule = DiffusionSchedule.linear(50)
    x0 = rng.standard_normal((2, 5, 2, 2))
    steps = np.array([3, 41])
    noise = rng.standard_normal(x0.shape)
    return ad.finite_diff_check(lambda: ddpm_loss(x0, net, schedule, steps=steps, noise=noise),
                                list(net.parameters().values()), h=STEP)


def check_blocks(layers: int = 2, heads: int = 2, d_h: int = 8, m: int = 2, nodes: int = 3,
                 layout: str = "joint", max_coords: int | None = None, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    blocks = [BlockParams(d_h, heads, 4 * d_h, rng, F64) for _ in range(layers)]
    z = Tensor(rng.standard_normal((m, nodes, d_h)), True, F64)
    w = rng.standard_normal(z.shape)
    params = [z] + [p for b in blocks for p in b.parameters().values()]
    return ad.finite_diff_check(lambda: (stllm_forward(z, blocks, 1e-6, layout) * w).sum(),
                                params, h=STEP, max_coords=max_coords, seed=seed)


def check_head(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    head = HeadParams(4, 6, 3, 2, rng, F64)
    x = Tensor(rng.standard_normal((2, 4, 3, 6)), True, F64)
    w = rng.standard_normal((2, 3, 3, 2))
    return ad.finite_diff_check(lambda: (predict_head(x, head) * w).sum(),
                                [x, head.W, head.b], h=STEP)


def check_end_to_end(seed: int = 0, max_coords: int | None = None) -> float:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(input_len=4, output_len=3, num_nodes=2, num_features=1, d_f=2, d_a=2,
                      slots_per_day=8, layers=2, heads=2, profile="f64")
    model = Forecaster(cfg, seed=seed)
    x = rng.standard_normal((2, 4, 2, 1))
    dow = rng.integers(0, 7, (2, 4))
    tod = rng.integers(0, 8, (2, 4))
    y = Tensor(rng.standard_normal((2, 3, 2, 1)), dtype=F64)

    def loss():
        diff = model(x, dow, tod) - y
        return (diff * diff).mean()

    return ad.finite_diff_check(loss, list(model.parameters().values()), h=STEP,
                                max_coords=max_coords, seed=seed)


def run_all(seed: int = 0, parity: bool = True) -> GradCheckReport:
    """Every op rule, then each model part, then the full forecaster."""
    report = GradCheckReport()
    report.errors.update(check_ops(seed))
    report.errors["embedding"] = check_embedding(seed)
    report.errors["diffusion_predictor"] = check_denoiser(seed)
    report.errors["stllm_blocks"] = check_blocks(seed=seed)
    report.errors["stllm_blocks_factorized"] = check_blocks(layout="factorized", seed=seed)
    if parity:
        # full-scale depth and head count on a 2 x 3 token grid
        report.errors["stllm_blocks_17x32"] = check_blocks(layers=17, heads=32, d_h=32,
                                                           max_coords=3, seed=seed)
    report.errors["head"] = check_head(seed)
    report.errors["end_to_end"] = check_end_to_end(seed)
    return report
