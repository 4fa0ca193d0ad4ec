"""Minimal dense tensor with define-by-run reverse-mode differentiation.

Every op records a :class:`Node` on the output tensor; :func:`backward` walks
the recorded graph in reverse creation order, so each node is visited exactly
once and gradients from fan-out are summed.  All data is float64.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParameterError
from .rng import Stream

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

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
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.id = next(_ids)
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out.node = Node(op, inputs, backward_fn) if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make("clamp", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make("relu", a.data * pos, (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make("sum", np.asarray(out, dtype=DTYPE), (a,),
                 lambda g: (np.broadcast_to(np.reshape(g, kept), shape).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------------- structure


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, index) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make("take", np.array(a.data[index], dtype=DTYPE), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat of empty sequence")
    ref = ts[0].shape
    axis = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make("broadcast", np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),))


# -------------------------------------------------------------------- linalg


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), bw)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine gain/bias."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make("layer_norm", xhat, (x,), bw)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


# ------------------------------------------------------------------- volumes


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x, kernels, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlate ``x[C_in,W,H,D]`` with ``kernels[C_out,C_in,k,k,k]``.

    ``padding`` defaults to ``(k-1)//2`` (shape preserving at stride 1).
    """
    x, w = as_tensor(x), as_tensor(kernels)
    if x.ndim != 4:
        raise DimensionError(f"conv3d input must be C×W×H×D, got {x.shape}")
    if w.ndim == 3:
        k = round(w.shape[2] ** (1 / 3))
        w = reshape(w, (w.shape[0], w.shape[1], k, k, k))
    if w.ndim != 5 or len(set(w.shape[2:])) != 1:
        raise DimensionError(f"conv3d kernels must be C_out×C_in×k×k×k, got {w.shape}")
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[0] != c_in:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape} vs kernels {w.shape}")
    if k % 2 == 0:
        raise ParameterError(f"conv3d kernel size must be odd, got {k}")
    if stride < 1:
        raise ParameterError(f"conv3d stride must be >= 1, got {stride}")
    p = (k - 1) // 2 if padding is None else int(padding)
    spatial = x.shape[1:]
    outs = tuple(_conv_out(n, k, stride, p) for n in spatial)
    if min(outs) < 1:
        raise DimensionError(f"conv3d output would be empty for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    wd = w.data
    offsets = list(itertools.product(range(k), repeat=3))

    def window(i, j, l):
        return (slice(None),
                slice(i, i + stride * (outs[0] - 1) + 1, stride),
                slice(j, j + stride * (outs[1] - 1) + 1, stride),
                slice(l, l + stride * (outs[2] - 1) + 1, stride))

    n_out = outs[0] * outs[1] * outs[2]
    out = np.zeros((c_out, n_out), dtype=DTYPE)
    for i, j, l in offsets:
        out += wd[:, :, i, j, l] @ xp[window(i, j, l)].reshape(c_in, n_out)

    def bw(g):
        g2 = g.reshape(c_out, n_out)
        gx = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i, j, l in offsets:
            win = window(i, j, l)
            gw[:, :, i, j, l] = g2 @ xp[win].reshape(c_in, n_out).T
            gx[win] += (wd[:, :, i, j, l].T @ g2).reshape((c_in,) + outs)
        if p:
            gx = gx[:, p:-p, p:-p, p:-p]
        return (np.ascontiguousarray(gx), gw)

    return _make("conv3d", out.reshape((c_out,) + outs), (x, w), bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the three spatial axes of ``C×W×H×D``."""
    x = as_tensor(x)
    c, a, b, d = x.shape
    f = int(factor)
    out = np.broadcast_to(
        x.data[:, :, None, :, None, :, None], (c, a, f, b, f, d, f)
    ).reshape(c, a * f, b * f, d * f)

    def bw(g):
        return (g.reshape(c, a, f, b, f, d, f).sum(axis=(2, 4, 6)),)

    return _make("upsample", np.ascontiguousarray(out), (x,), bw)


def dropout(x, rate: float, rng: Stream | None = None, active: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` when active."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("active dropout requires an explicit random stream")
    keep = rng.generator.random(x.shape) >= rate
    scale = keep * (1.0 / (1.0 - rate))
    return _make("dropout", x.data * scale, (x,), lambda g: (g * scale,))


# ------------------------------------------------------------------- backward


def graph_of(root: Tensor) -> list[Node]:
    """Recorded nodes reachable from ``root`` in topological (creation) order."""
    return [t.node for t in _topo(root)]


def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    found: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen or t.node is None:
            continue
        seen.add(t.id)
        found.append(t)
        stack.extend(t.node.inputs)
    found.sort(key=lambda t: t.id)
    return found


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor with ``requires_grad`` reachable from ``loss``.

    Leaf gradients accumulate across calls; call :meth:`Tensor.zero_grad` to reset.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for t in reversed(order):
        g = pending.pop(t.id, None)
        if g is None:
            continue
        t.grad = g
        for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp.id in pending:
                pending[inp.id] = pending[inp.id] + gi
            else:
                pending[inp.id] = gi


# ------------------------------------------------------------------ optimizer


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``state`` holds the step counter and moment buffers and is mutated.
    """
    t = state.get("t", 0) + 1
    state["t"] = t
    m = state.setdefault("m", [np.zeros_like(p.data) for p in params])
    v = state.setdefault("v", [np.zeros_like(p.data) for p in params])
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def global_norm(arrays: Iterable[np.ndarray | None]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays if a is not None)))
