"""Dense NCHW tensors with a tape-based reverse mode.

Every operation returns a new immutable :class:`Tensor`.  When a :class:`Tape`
is active and any input requires a gradient, the operation appends a node to
the tape holding a vector-Jacobian closure; :func:`backward` replays those
nodes in exact reverse order.

Operations also report their multiply-accumulate count to an active
:class:`Instrument`, which is how the accounting module is cross-checked
against real execution.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "Instrument", "NormStats", "NonFiniteError", "ShapeError",
    "set_precision", "get_dtype", "tensor", "parameter", "apply", "scope", "backward",
    "conv2d", "bilinear_resize", "maxpool2d", "batchnorm2d",
    "add", "sub", "mul", "scale", "relu", "silu", "sigmoid", "softplus", "neg_exp",
    "softmax_channels", "concat", "split", "concat_channels", "split_channels",
    "linear", "causal_conv1d", "sum_all", "weighted_sum",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_PRECISIONS = {"float64": np.float64, "float32": np.float32}
_DTYPE = _PRECISIONS[os.environ.get("INCEPTION_MAMBA_PRECISION", "float64")]


def set_precision(name: str) -> None:
    """Switch the scalar type used for new tensors ("float64" or "float32")."""
    global _DTYPE
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _DTYPE = _PRECISIONS[name]


def get_dtype() -> type:
    return _DTYPE


_names = itertools.count()


class Tensor:
    """Immutable dense array, usually shaped (n, c, h, w)."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        if requires_grad and name is None:
            name = f"t{next(_names)}"
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --- tape, scopes and instrumentation -------------------------------------------------

@dataclass
class Node:
    op: str
    scope: str
    parents: tuple[Tensor, ...]
    out: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; one training step owns one tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)

    def leaves(self) -> dict[str, Tensor]:
        produced = {id(n.out) for n in self.nodes}
        found: dict[str, Tensor] = {}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and id(p) not in produced:
                    found.setdefault(p.name, p)
        return found


@dataclass
class Event:
    scope: str
    op: str
    macs: int
    shape: tuple[int, ...]


@dataclass
class Instrument:
    """Counts multiply-accumulates and records the layer trace of executed ops."""

    events: list[Event] = field(default_factory=list)
    _token: object = None

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.events)

    def scopes(self) -> list[str]:
        return [e.scope for e in self.events]

    def __enter__(self) -> "Instrument":
        self._token = _INSTRUMENT.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _INSTRUMENT.reset(self._token)


_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("tape", default=None)
_INSTRUMENT: contextvars.ContextVar[Instrument | None] = contextvars.ContextVar("instrument", default=None)
_SCOPE: contextvars.ContextVar[str] = contextvars.ContextVar("scope", default="")


@contextlib.contextmanager
def scope(name: str):
    """Prefix the trace scope of every op executed inside the block."""
    parent = _SCOPE.get()
    token = _SCOPE.set(f"{parent}/{name}" if parent else name)
    try:
        yield
    finally:
        _SCOPE.reset(token)


def apply(op: str, out: np.ndarray, parents: Iterable[Tensor],
          vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]], macs: int) -> Tensor:
    """Wrap a kernel result as a Tensor, checking finiteness and recording it.

    ``vjp`` maps the output gradient to one gradient (or None) per parent.
    """
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values (scope {_SCOPE.get() or '<root>'})")
    inst = _INSTRUMENT.get()
    if inst is not None:
        inst.events.append(Event(_SCOPE.get(), op, int(macs), tuple(out.shape)))
    result = Tensor._wrap(out)
    parents = tuple(parents)
    tape = _TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        result.requires_grad = True
        tape.nodes.append(Node(op, _SCOPE.get(), parents, result, vjp))
    return result


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[str, np.ndarray]:
    """Reverse-mode sweep over ``tape``.

    Returns gradients keyed by tensor name for every leaf on the tape that
    requires a gradient, plus zeros for any of ``params`` the loss never touched.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.shape:
                raise ShapeError(f"{node.op}: gradient shape {gp.shape} != operand shape {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    out: dict[str, np.ndarray] = {}
    for name, leaf in tape.leaves().items():
        out[name] = grads.get(id(leaf), np.zeros_like(leaf.data))
    for p in params:
        if p.requires_grad and p.name not in out:
            out[p.name] = np.zeros_like(p.data)
    return out


# --- convolution ----------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def _pad(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    width = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    if mode == "zero":
        return np.pad(x, width)
    return np.pad(x, width, mode="edge")


def _unpad(g: np.ndarray, ph: int, pw: int, mode: str, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_pad`."""
    if ph == 0 and pw == 0:
        return g
    if mode == "replicate":
        g = g.copy()
        if ph:
            g[:, :, ph, :] += g[:, :, :ph, :].sum(axis=2)
            g[:, :, ph + h - 1, :] += g[:, :, ph + h:, :].sum(axis=2)
        if pw:
            g[:, :, :, pw] += g[:, :, :, :pw].sum(axis=3)
            g[:, :, :, pw + w - 1] += g[:, :, :, pw + w:].sum(axis=3)
    return g[:, :, ph:ph + h, pw:pw + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           padding_mode: str = "zero", groups: int = 1) -> Tensor:
    """2-D cross-correlation over an (n, c, h, w) input.

    ``weight`` has shape (c_out, c_in // groups, k_h, k_w); output spatial
    size is ``(in + 2p - k) // s + 1`` per axis.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_per_group, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if padding_mode not in ("zero", "replicate"):
        raise ValueError(f"unknown padding_mode {padding_mode!r}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
    if c_per_group != c_in // groups:
        raise ShapeError(f"weight expects {c_per_group * groups} input channels, got {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1

    xp = _pad(x.data, ph, pw, padding_mode)
    wt = weight.data
    depthwise = groups == c_in == c_out
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    hs, ws = sh * (ho - 1) + 1, sw * (wo - 1) + 1

    if depthwise:
        out = np.zeros((n, c_out, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i:i + hs:sh, j:j + ws:sw] * wt[:, 0, i, j][None, :, None, None]
    elif groups == 1:
        out = np.tensordot(win, wt, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        og = c_out // groups
        parts = [np.tensordot(win[:, g * c_per_group:(g + 1) * c_per_group], wt[g * og:(g + 1) * og],
                              axes=([1, 4, 5], [1, 2, 3])) for g in range(groups)]
        out = np.concatenate(parts, axis=3).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.empty_like(wt)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + hs, sh), slice(j, j + ws, sw))
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                    gxp[sl] += g * wt[:, 0, i, j][None, :, None, None]
        elif groups == 1:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            cols = np.tensordot(g, wt, axes=([1], [0]))  # (n, ho, wo, c, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:sh, j:j + ws:sw] += cols[..., i, j].transpose(0, 3, 1, 2)
        else:
            og = c_out // groups
            gw = np.empty_like(wt)
            for grp in range(groups):
                cs, os_ = slice(grp * c_per_group, (grp + 1) * c_per_group), slice(grp * og, (grp + 1) * og)
                gw[os_] = np.tensordot(g[:, os_], win[:, cs], axes=([0, 2, 3], [0, 2, 3]))
                cols = np.tensordot(g[:, os_], wt[os_], axes=([1], [0]))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, cs, i:i + hs:sh, j:j + ws:sw] += cols[..., i, j].transpose(0, 3, 1, 2)
        gx = _unpad(gxp, ph, pw, padding_mode, h, w)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    macs = kh * kw * c_per_group * c_out * ho * wo * n
    parents = (x, weight, bias) if bias is not None else (x, weight)
    return apply("conv2d", out, parents, vjp, macs)


# --- resampling and pooling -----------------------------------------------------------

def _lerp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, source coordinate clamped to the valid range
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, f = _lerp_axis(n_in, n_out)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with align-corners=False semantics."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("cannot resize an empty input")
    dt = x.data.dtype
    r0, r1, rf = _lerp_axis(h, out_h)
    c0, c1, cf = _lerp_axis(w, out_w)
    rf, cf = rf.astype(dt), cf.astype(dt)
    a, b = x.data[:, :, r0, :], x.data[:, :, r1, :]
    rows = a + rf[:, None] * (b - a)
    a, b = rows[:, :, :, c0], rows[:, :, :, c1]
    out = a + cf * (b - a)

    def vjp(g):
        mh = _interp_matrix(h, out_h).astype(dt)
        mw = _interp_matrix(w, out_w).astype(dt)
        return (np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True),)

    return apply("bilinear_resize", out, (x,), vjp, out.size)


def maxpool2d(x: Tensor, k: int, s: int) -> Tensor:
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds input {h}x{w}")
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s].reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        ni, ci, oi, oj = np.indices((n, c, ho, wo), sparse=False)
        np.add.at(gx, (ni, ci, oi * s + arg // k, oj * s + arg % k), g)
        return (gx,)

    return apply("maxpool2d", np.ascontiguousarray(out), (x,), vjp, out.size)


# --- normalisation --------------------------------------------------------------------

@dataclass
class NormStats:
    """Running statistics of one batch-norm layer (single writer during training)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "NormStats":
        return cls(np.zeros(channels, dtype=_DTYPE), np.ones(channels, dtype=_DTYPE))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: NormStats, training: bool) -> Tensor:
    """Per-channel normalisation; batch statistics in training, running ones otherwise.

    Training mode also updates ``stats`` in place (momentum-weighted, unbiased variance).
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or stats.running_mean.shape != (c,):
        raise ShapeError(f"batchnorm parameters do not match {c} channels")
    xd = x.data
    eps = stats.eps
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = n * h * w
        unbiased = var * m / (m - 1) if m > 1 else var
        stats.running_mean = (1 - stats.momentum) * stats.running_mean + stats.momentum * mean
        stats.running_var = (1 - stats.momentum) * stats.running_var + stats.momentum * unbiased
    else:
        mean, var, m = stats.running_mean, stats.running_var, n * h * w
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def vjp(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, gg, gb

    return apply("batchnorm2d", out, (x, gamma, beta), vjp, out.size)


# --- pointwise ------------------------------------------------------------------------

def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return apply("add", a.data + b.data, (a, b), lambda g: (g, g), a.data.size)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return apply("sub", a.data - b.data, (a, b), lambda g: (g, -g), a.data.size)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return apply("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), a.data.size)


def scale(a: Tensor, factor: float) -> Tensor:
    return apply("scale", a.data * factor, (a,), lambda g: (g * factor,), a.data.size)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply("relu", np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,),
                 lambda g: (g * mask,), x.data.size)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return apply("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),), x.data.size)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return apply("silu", out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), x.data.size)


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return apply("softplus", out, (x,), lambda g: (g * _sigmoid(v),), v.size)


def neg_exp(x: Tensor) -> Tensor:
    """``-exp(x)``; maps unconstrained log-parameters to strictly negative values."""
    out = -np.exp(x.data)
    return apply("neg_exp", out, (x,), lambda g: (g * out,), out.size)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax across axis 1 at every (n, h, w)."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return apply("softmax_channels", s, (x,), vjp, s.size)


# --- structural -----------------------------------------------------------------------

def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeError(f"concat: {xs[0].shape} and {t.shape} differ outside axis {axis}")
    if len(xs) == 1:
        return xs[0]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return apply("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), 0)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if any(s < 0 for s in sizes) or sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {tuple(sizes)} do not sum to {x.shape[axis]}")
    out = []
    start = 0
    for size in sizes:
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(start, start + size)
        idx = tuple(idx)

        def vjp(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        out.append(apply("split", np.ascontiguousarray(x.data[idx]), (x,), vjp, 0))
        start += size
    return out


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    return split(x, sizes, axis=1)


# --- sequence ops (last axis = features) ----------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is (in, out)."""
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear: input features {x.shape[-1]} != {d_in}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, d_in).T @ g.reshape(-1, d_out)
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, d_out).sum(axis=0)

    positions = x.data.size // d_in
    parents = (x, weight) if bias is None else (x, weight, bias)
    return apply("linear", out, parents, vjp, positions * d_in * d_out)


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution along axis 1 of an (n, L, d) sequence.

    ``weight`` is (d, K); the sequence is left-padded with K-1 zeros so the
    output at step t only sees inputs up to t.
    """
    n, length, d = x.shape
    dw, k = weight.shape
    if dw != d:
        raise ShapeError(f"causal_conv1d: weight channels {dw} != {d}")
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j:j + length, :] * weight.data[:, j]
    if bias is not None:
        out += bias.data

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for j in range(k):
            gxp[:, j:j + length, :] += g * weight.data[:, j]
            gw[:, j] = np.einsum("nld,nld->d", g, xp[:, j:j + length, :])
        gx = gxp[:, k - 1:, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return apply("causal_conv1d", out, parents, vjp, n * length * d * k)


# --- reductions -----------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return apply("sum_all", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.full_like(x.data, g),), x.data.size)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` for a constant array of weights."""
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} != {x.shape}")
    return apply("weighted_sum", np.asarray((x.data * w).sum()), (x,),
                 lambda g: (g * w,), x.data.size)
