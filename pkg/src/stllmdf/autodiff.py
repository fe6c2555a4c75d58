"""Dense tensors with reverse-mode differentiation on top of numpy.

Every differentiable operation records its name, its parent tensors and a small
context of saved arrays.  :func:`backward` walks the trace in reverse
topological order and applies the rule registered for each operation in
:data:`GRADIENT_RULES`.  Tensors with ``requires_grad=False`` (frozen
parameters, constants, data) never receive a gradient entry.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, GradCheckError, ShapeError, UsageError

# Numeric profiles: 64-bit for gradient checks and oracles, 32-bit for training.
PROFILES = {"f32": np.float32, "f64": np.float64}

GRADIENT_RULES: dict[str, Callable] = {}

_grad_enabled = True


def dtype_for(profile: str):
    try:
        return PROFILES[profile]
    except KeyError:
        raise ConfigurationError(f"unknown numeric profile {profile!r}") from None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a trace."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _rule(name):
    def register(fn):
        GRADIENT_RULES[name] = fn
        return fn
    return register


class Tensor:
    """An n-dimensional array that can take part in a differentiation trace."""

    __slots__ = ("data", "requires_grad", "name", "_op", "_parents", "_ctx")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._op = None
        self._parents = ()
        self._ctx = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_const(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_const(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, op: str, parents: tuple, ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._op, out._parents, out._ctx = op, parents, ctx
    else:
        out._op, out._parents, out._ctx = None, (), None
    return out


def _check_broadcast(sa: tuple, sb: tuple, op: str):
    # Allowed: equal shapes, scalars, one shape a trailing suffix of the other
    # (leading batch axes), or equal rank with size-1 axes (keepdims reductions).
    if sa == sb or not sa or not sb:
        return
    if len(sa) != len(sb):
        short, long = (sa, sb) if len(sa) < len(sb) else (sb, sa)
        if long[len(long) - len(short):] == short:
            return
    elif all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    b = _const(b, a)
    _check_broadcast(a.shape, b.shape, "add")
    return _make(a.data + b.data, "add", (a, b))


@_rule("add")
def _add_grad(node, g):
    a, b = node._parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    b = _const(b, a)
    _check_broadcast(a.shape, b.shape, "sub")
    return _make(a.data - b.data, "sub", (a, b))


@_rule("sub")
def _sub_grad(node, g):
    a, b = node._parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    b = _const(b, a)
    _check_broadcast(a.shape, b.shape, "mul")
    return _make(a.data * b.data, "mul", (a, b))


@_rule("mul")
def _mul_grad(node, g):
    a, b = node._parents
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    b = _const(b, a)
    _check_broadcast(a.shape, b.shape, "div")
    return _make(a.data / b.data, "div", (a, b))


@_rule("div")
def _div_grad(node, g):
    a, b = node._parents
    ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
    return ga, gb


def neg(a) -> Tensor:
    return _make(-a.data, "neg", (a,))


@_rule("neg")
def _neg_grad(node, g):
    return (-g,)


def power(a, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise UsageError("power supports a constant exponent only")
    return _make(a.data ** exponent, "power", (a,), exponent)


@_rule("power")
def _power_grad(node, g):
    (a,), k = node._parents, node._ctx
    return (g * k * a.data ** (k - 1),)


def exp(a) -> Tensor:
    return _make(np.exp(a.data), "exp", (a,))


@_rule("exp")
def _exp_grad(node, g):
    return (g * node.data,)


def log(a) -> Tensor:
    return _make(np.log(a.data), "log", (a,))


@_rule("log")
def _log_grad(node, g):
    return (g / node._parents[0].data,)


def relu(a) -> Tensor:
    return _make(np.maximum(a.data, 0), "relu", (a,))


@_rule("relu")
def _relu_grad(node, g):
    return (g * (node._parents[0].data > 0),)


def silu(a) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(a.data * s, "silu", (a,), s)


@_rule("silu")
def _silu_grad(node, g):
    x, s = node._parents[0].data, node._ctx
    return (g * (s * (1 + x * (1 - s))),)


def tabs(a) -> Tensor:
    return _make(np.abs(a.data), "abs", (a,))


@_rule("abs")
def _abs_grad(node, g):
    return (g * np.sign(node._parents[0].data),)


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), (axis, keepdims))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@_rule("sum")
def _sum_grad(node, g):
    a = node._parents[0]
    axis, keepdims = node._ctx
    return (_expand_reduced(g, a.shape, axis, keepdims),)


def mean(a, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), "mean", (a,), (axis, keepdims))


@_rule("mean")
def _mean_grad(node, g):
    a = node._parents[0]
    axis, keepdims = node._ctx
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in axis]))
    return (_expand_reduced(g, a.shape, axis, keepdims) / count,)


# ------------------------------------------------------------- shape plumbing

def reshape(a, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(data, "reshape", (a,))


@_rule("reshape")
def _reshape_grad(node, g):
    return (g.reshape(node._parents[0].shape),)


def transpose(a, axes) -> Tensor:
    axes = tuple(int(x) % a.ndim for x in axes)
    return _make(a.data.transpose(axes), "transpose", (a,), axes)


@_rule("transpose")
def _transpose_grad(node, g):
    return (g.transpose(np.argsort(node._ctx)),)


def broadcast_to(a, shape) -> Tensor:
    """Expand ``a`` along new leading axes (or size-1 axes) to ``shape``."""
    shape = tuple(shape)
    _check_broadcast(a.shape, shape, "broadcast_to")
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}") from None
    return _make(data, "broadcast_to", (a,))


@_rule("broadcast_to")
def _broadcast_grad(node, g):
    return (_unbroadcast(g, node._parents[0].shape),)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ndim = tensors[0].ndim
    axis %= ndim
    for t in tensors[1:]:
        same = t.ndim == ndim and all(
            t.shape[i] == tensors[0].shape[i] for i in range(ndim) if i != axis)
        if not same:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, "concat", tensors, (axis, np.cumsum(sizes)[:-1]))


@_rule("concat")
def _concat_grad(node, g):
    axis, cuts = node._ctx
    return tuple(np.split(g, cuts, axis=axis))


def take(table, index) -> Tensor:
    """Row lookup ``table[index]`` for a 2-D table and an integer index array."""
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise UsageError("take: index array must be integral")
    if table.ndim != 2:
        raise ShapeError(f"take: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take: index out of range for vocabulary of {table.shape[0]}")
    return _make(table.data[idx], "take", (table,), idx)


@_rule("take")
def _take_grad(node, g):
    table, idx = node._parents[0], node._ctx
    out = np.zeros(table.shape, dtype=g.dtype)
    np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
    return (out,)


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., p, q] @ b[..., q, r]``."""
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        if b.ndim == 2 and a.ndim > 2:
            # one GEMM over all leading rows
            data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
        else:
            data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    return _make(data, "matmul", (a, b))


@_rule("matmul")
def _matmul_grad(node, g):
    a, b = node._parents
    ga = gb = None
    if a.requires_grad:
        if b.ndim == 2:
            ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def softmax_last(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the slice maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, "softmax_last", (x,))


@_rule("softmax_last")
def _softmax_grad(node, g):
    y = node.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def rmsnorm(x, gamma, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gamma`` over the last axis."""
    if gamma.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm: gain {gamma.shape} does not match width of {x.shape}")
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    n = x.data / r
    return _make(n * gamma.data, "rmsnorm", (x, gamma), (n, r))


@_rule("rmsnorm")
def _rmsnorm_grad(node, g):
    x, gamma = node._parents
    n, r = node._ctx
    gx = gg = None
    if x.requires_grad:
        gn = g * gamma.data
        gx = (gn - n * (gn * n).mean(axis=-1, keepdims=True)) / r
    if gamma.requires_grad:
        gg = (g * n).reshape(-1, gamma.shape[0]).sum(axis=0)
    return gx, gg


def conv_time(x, kernel) -> Tensor:
    """1-D convolution along the time axis of ``x[..., T, N, c_in]``, per node.

    ``kernel`` has shape ``(w, c_in, c_out)`` with odd ``w``; the time axis is
    zero-padded so the output keeps ``T`` steps.  Tap ``k`` multiplies the input
    at offset ``k - w // 2`` (cross-correlation).
    """
    if kernel.ndim != 3:
        raise ShapeError(f"conv_time: kernel must be (w, c_in, c_out), got {kernel.shape}")
    w, c_in, _ = kernel.shape
    if w % 2 == 0:
        raise ConfigurationError(f"conv_time: kernel width must be odd, got {w}")
    if x.ndim < 3 or x.shape[-1] != c_in:
        raise ShapeError(f"conv_time: input {x.shape} does not match kernel {kernel.shape}")
    pad = w // 2
    steps = x.shape[-3]
    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (0, 0), (0, 0)]
    xp = np.pad(x.data, widths)
    out = xp[..., 0:steps, :, :] @ kernel.data[0]
    for k in range(1, w):
        out = out + xp[..., k:k + steps, :, :] @ kernel.data[k]
    return _make(out, "conv_time", (x, kernel), xp)


@_rule("conv_time")
def _conv_time_grad(node, g):
    x, kernel = node._parents
    xp = node._ctx
    w, c_in, c_out = kernel.shape
    pad, steps = w // 2, x.shape[-3]
    gx = gk = None
    if x.requires_grad:
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(w):
            gxp[..., k:k + steps, :, :] += g @ kernel.data[k].T
        gx = gxp[..., pad:pad + steps, :, :]
    if kernel.requires_grad:
        g2 = g.reshape(-1, c_out)
        gk = np.stack([xp[..., k:k + steps, :, :].reshape(-1, c_in).T @ g2 for k in range(w)])
    return gx, gk


# ------------------------------------------------------------------- backward

def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Return ``{leaf tensor: gradient}`` for every traced leaf under ``loss``.

    Frozen tensors (``requires_grad=False``) are absent from the map.  Each
    traced operation is visited exactly once, in reverse topological order.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise UsageError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        raise UsageError("backward: loss is not traced (nothing requires a gradient)")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._op is None:
            leaves[node] = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            continue
        for p, pg in zip(node._parents, GRADIENT_RULES[node._op](node, g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return leaves


# ------------------------------------------------------ finite differences

def finite_diff_errors(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                       max_coords: int | None = None, seed: int = 0) -> list:
    """Worst relative error per parameter between reverse mode and central differences.

    ``f`` takes no arguments and closes over ``params``; it must be
    deterministic.  With ``max_coords`` set, that many coordinates per
    parameter are drawn (seeded) instead of checking all of them.
    """
    if h <= 0:
        raise GradCheckError(f"step must be positive, got {h}")
    params = list(params)
    base = f()
    with no_grad():
        again = f()
    if base.size != 1 or not np.array_equal(base.data, again.data):
        raise GradCheckError("function is not deterministic; fix its seed before checking")
    grads = backward(base)
    rng = np.random.default_rng(seed)
    worst = []
    for p in params:
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.array(p.data, order="C")
        flat = p.data.reshape(-1)
        analytic = grads.get(p, np.zeros(p.shape, dtype=p.dtype)).reshape(-1)
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        err = 0.0
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(analytic[i])
                err = max(err, abs(num - ana) / max(abs(ana), abs(num), 1e-8))
        worst.append(err)
    return worst


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    errors = finite_diff_errors(f, params, h=h, max_coords=max_coords, seed=seed)
    return max(errors, default=0.0)
