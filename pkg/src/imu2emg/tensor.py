"""Small reverse-mode autodiff engine over numpy arrays.

Only the operators the GEGLU-Transformer needs are provided. Each op builds
its output ``Tensor`` together with a closure that maps the output gradient
to gradients of its inputs. ``backward`` orders the graph reachable from a
scalar loss into a :class:`Tape` and replays the closures in reverse.

Batched inputs are handled by ordinary numpy broadcasting: a weight of shape
``[d, e]`` multiplied into activations of shape ``[B, T, d]`` receives the
gradient summed over the broadcast axes.
"""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True
_debug = os.environ.get("IMU2EMG_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operator hyperparameter is outside its legal range."""


def set_debug(flag: bool) -> None:
    """Check every forward result for NaN/Inf when ``flag`` is set."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        # scalar constant: keep dtype of a
        a = _wrap(a)
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    a = _wrap(a)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, (a, b), back, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make((xd * cdf).astype(xd.dtype, copy=False), (x,), back, "gelu")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    dt = x.dtype
    return _make(
        np.asarray(x.data.sum(), dtype=dt), (x,), lambda g: (np.broadcast_to(g, src).astype(dt),), "sum"
    )


def mean_all(x: Tensor) -> Tensor:
    src = x.shape
    n = x.size
    dt = x.dtype
    return _make(
        np.asarray(x.data.mean(), dtype=dt),
        (x,),
        lambda g: (np.full(src, g / n, dtype=dt),),
        "mean",
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            # weight shared across the batch: fold batch axes into rows
            gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _make(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as ``[in, out]``."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------- softmax / norms


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gamma.shape}/{beta.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of ``[..., C, T]`` over (channels in group x time)."""
    xd = x.data
    c, t = xd.shape[-2], xd.shape[-1]
    if num_groups < 1 or c % num_groups:
        raise ConfigError(f"{c} channels not divisible into {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine shape {gamma.shape}/{beta.shape} != ({c},)")
    lead = xd.shape[:-2]
    xg = xd.reshape(lead + (num_groups, (c // num_groups) * t))
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(xd.shape)
    gcol = gamma.data[:, None]
    red = tuple(range(len(lead))) + (xd.ndim - 1,)

    def back(g):
        gxhat = (g * gcol).reshape(xg.shape)
        xh = xhat.reshape(xg.shape)
        gx = inv * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xh * (gxhat * xh).mean(axis=-1, keepdims=True)
        )
        return gx.reshape(xd.shape), (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gcol + beta.data[:, None], (x, gamma, beta), back, "group_norm")


# ---------------------------------------------------------------- convolution


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is ``[in_ch, T]`` or ``[B, in_ch, T]``; ``w`` is ``[out_ch, in_ch, k]``.
    """
    out_ch, in_ch, k = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    xd = x.data
    if xd.shape[-2] != in_ch:
        raise ShapeError(f"conv1d input {x.shape} does not match kernel {w.shape}")
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    bsz, _, t = xd.shape
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    # cols[b, t, i, j] = xp[b, i, t + j]
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3)
    cols = np.ascontiguousarray(cols).reshape(bsz, t, in_ch * k)
    wm = w.data.reshape(out_ch, in_ch * k)
    y = (cols @ wm.T).transpose(0, 2, 1) + b.data[:, None]
    if squeeze:
        y = y[0]

    def back(g):
        g3 = g[None] if squeeze else g
        gt = g3.transpose(0, 2, 1)  # [B, T, out]
        gw = (gt.reshape(-1, out_ch).T @ cols.reshape(-1, in_ch * k)).reshape(w.shape)
        gb = g3.sum(axis=(0, 2))
        gcols = (gt @ wm).reshape(bsz, t, in_ch, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + t] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, pad : pad + t]
        return (gx[0] if squeeze else gx), gw, gb

    return _make(np.ascontiguousarray(y), (x, w, b), back, "conv1d")


# ---------------------------------------------------------------- randomness / dropout


@dataclass
class RngState:
    """Counter-based random stream: (seed, counter) fully determines output.

    Backed by the Philox generator, whose state *is* a key and a counter.
    ``counter`` counts blocks consumed so the stream can be checkpointed.
    """

    seed: int
    counter: int = 0
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed, counter=int(self.counter)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def sync(self) -> "RngState":
        bg = self._gen.bit_generator
        self.counter = int(bg.state["state"]["counter"][0])
        return self

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def spawn(self, salt: int) -> "RngState":
        """Independent child stream derived from (seed, salt)."""
        return RngState(int(np.random.SeedSequence([self.seed, salt]).generate_state(1, np.uint64)[0]))


def dropout(x: Tensor, rate: float, training: bool, rng: RngState | None) -> Tensor:
    """Inverted dropout; identity outside training or at ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an RngState")
    keep = (rng.uniform(x.shape) >= rate).astype(x.dtype)
    keep /= x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- losses


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = _wrap(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    return mean_all(square(sub(pred, target)))


# ---------------------------------------------------------------- backward


@dataclass
class Tape:
    """Nodes reachable from a loss, inputs before outputs."""

    nodes: list[Tensor]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> Tape:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Leaves passed in ``leaves`` that the loss does not touch get zero grads.
    Leaf gradients are overwritten, not accumulated.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = list(leaves)
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return Tape([])
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape
