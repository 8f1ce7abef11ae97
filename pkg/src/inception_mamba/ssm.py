"""Selective state-space scan and the gated Mamba block around it."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .params import Scoped
from .tensor_core import ShapeError, Tensor

SCAN_BLOCK = 16
DIRECTIONS = ("forward",)


@dataclass(frozen=True)
class SsmConfig:
    expand: int = 2
    n_state: int = 16
    conv_w: int = 4
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"scan direction {self.direction!r} not supported; choose from {DIRECTIONS}")
        if self.expand < 1 or self.n_state < 1 or self.conv_w < 1:
            raise ValueError("expand, n_state and conv_w must be positive")

    def d_inner(self, d_model: int) -> int:
        return self.expand * d_model


@dataclass
class SsmParams:
    """Tensors of one Mamba block; linear weights are stored (in, out)."""

    in_proj_w: Tensor
    in_proj_b: Tensor
    conv_w: Tensor
    conv_b: Tensor
    x_proj_w: Tensor
    x_proj_b: Tensor
    dt_proj_w: Tensor
    dt_proj_b: Tensor
    a_log: Tensor
    d_skip: Tensor
    out_proj_w: Tensor
    out_proj_b: Tensor

    @property
    def d_model(self) -> int:
        return self.in_proj_w.shape[0]

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def n_state(self) -> int:
        return self.a_log.shape[1]

    @classmethod
    def from_scope(cls, p: Scoped) -> "SsmParams":
        return cls(
            p["in_proj.weight"], p["in_proj.bias"], p["conv1d.weight"], p["conv1d.bias"],
            p["x_proj.weight"], p["x_proj.bias"], p["dt_proj.weight"], p["dt_proj.bias"],
            p["a_log"], p["d_skip"], p["out_proj.weight"], p["out_proj.bias"],
        )


def init_ssm(d_model: int, cfg: SsmConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    di, n, k = cfg.d_inner(d_model), cfg.n_state, cfg.conv_w

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    dt = np.exp(rng.uniform(math.log(0.01), math.log(0.1), size=di))
    return {
        "in_proj.weight": uniform((d_model, 2 * di), d_model),
        "in_proj.bias": np.zeros(2 * di),
        "conv1d.weight": uniform((di, k), k),
        "conv1d.bias": np.zeros(di),
        "x_proj.weight": uniform((di, 2 * n + 1), di),
        "x_proj.bias": np.zeros(2 * n + 1),
        "dt_proj.weight": uniform((1, di), 1),
        # inverse softplus so the initial step sizes land in [0.01, 0.1]
        "dt_proj.bias": dt + np.log(-np.expm1(-dt)),
        "a_log": np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (di, 1))),
        "d_skip": np.ones(di),
        "out_proj.weight": uniform((di, d_model), di),
        "out_proj.bias": np.zeros(d_model),
    }


def linear_scan(log_decay: np.ndarray, inp: np.ndarray, block: int = SCAN_BLOCK) -> np.ndarray:
    """All states of ``h_t = exp(log_decay_t) * h_{t-1} + inp_t`` with ``h_{-1} = 0``.

    Arrays are (batch, L, ...) with time on axis 1.  Time is processed in
    blocks: inside a block every state is a decay-weighted sum of the block's
    inputs plus the carried-in state, with all exponents non-positive.
    """
    n, length = inp.shape[:2]
    out = np.empty_like(inp)
    carry = np.zeros((n,) + inp.shape[2:], dtype=inp.dtype)
    for start in range(0, length, block):
        stop = min(start + block, length)
        ld = log_decay[:, start:stop]
        cum = np.cumsum(ld, axis=1)
        t = stop - start
        lower = np.tril(np.ones((t, t), dtype=bool)).reshape((1, t, t) + (1,) * (inp.ndim - 2))
        diff = cum[:, :, None] - cum[:, None, :]
        weights = np.exp(np.where(lower, diff, -np.inf))
        blk = np.einsum("nts...,ns...->nt...", weights, inp[:, start:stop])
        blk += np.exp(cum) * carry[:, None]
        out[:, start:stop] = blk
        carry = blk[:, -1]
    return out


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Input-dependent SSM recurrence per inner channel i and step t::

        h_t = exp(delta_ti * A_i) * h_{t-1} + delta_ti * B_t * u_ti
        y_ti = C_t . h_t + D_i * u_ti

    Shapes: u, delta (n, L, d) or (L, d); A (d, s); B, C (n, L, s) or (L, s); D (d,).
    """
    batched = u.data.ndim == 3
    uu, dd, bb, cc = (t.data if batched else t.data[None] for t in (u, delta, B, C))
    a, dsk = A.data, D.data
    if uu.ndim != 3 or dd.shape != uu.shape:
        raise ShapeError(f"selective_scan: u {u.shape} and delta {delta.shape} must match")
    n, length, d = uu.shape
    if a.ndim != 2 or a.shape[0] != d or dsk.shape != (d,):
        raise ShapeError(f"selective_scan: A {A.shape} / D {D.shape} inconsistent with d_inner={d}")
    s = a.shape[1]
    if bb.shape != (n, length, s) or cc.shape != (n, length, s):
        raise ShapeError(f"selective_scan: B {B.shape} / C {C.shape} inconsistent with (L={length}, n_state={s})")
    if not np.all(dd > 0):
        raise ValueError("selective_scan: delta must be strictly positive")

    log_decay = dd[..., None] * a  # (n, L, d, s)
    drive = (dd * uu)[..., None] * bb[:, :, None, :]
    states = linear_scan(log_decay, drive)
    y = np.einsum("nlds,nls->nld", states, cc) + uu * dsk

    def vjp(g):
        g = g if batched else g[None]
        g_direct = g[..., None] * cc[:, :, None, :]
        shifted = np.concatenate([log_decay[:, 1:], np.zeros_like(log_decay[:, :1])], axis=1)
        gh = linear_scan(shifted[:, ::-1], g_direct[:, ::-1])[:, ::-1]
        prev = np.concatenate([np.zeros_like(states[:, :1]), states[:, :-1]], axis=1)
        g_logdecay = gh * np.exp(log_decay) * prev
        gu = np.einsum("nlds,nls->nld", gh, bb) * dd + g * dsk
        gdelta = (np.einsum("nlds,ds->nld", g_logdecay, a)
                  + np.einsum("nlds,nls->nld", gh, bb) * uu)
        ga = np.einsum("nlds,nld->ds", g_logdecay, dd)
        gb = np.einsum("nlds,nld->nls", gh, dd * uu)
        gc = np.einsum("nld,nlds->nls", g, states)
        gd = np.einsum("nld,nld->d", g, uu)
        if not batched:
            gu, gdelta, gb, gc = gu[0], gdelta[0], gb[0], gc[0]
        return gu, gdelta, ga, gb, gc, gd

    out = y if batched else y[0]
    return tc.apply("selective_scan", out, (u, delta, A, B, C, D), vjp, n * length * d * (2 * s + 1))


def spatial_to_sequence(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, h*w, c) in row-major (h, w) order."""
    n, c, h, w = x.shape
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1).reshape(n, h * w, c))
    return tc.apply("to_sequence", out, (x,),
                    lambda g: (g.reshape(n, h, w, c).transpose(0, 3, 1, 2),), 0)


def sequence_to_spatial(s: Tensor, h: int, w: int) -> Tensor:
    n, length, c = s.shape
    if length != h * w:
        raise ShapeError(f"sequence length {length} != {h}*{w}")
    out = np.ascontiguousarray(s.data.reshape(n, h, w, c).transpose(0, 3, 1, 2))
    return tc.apply("to_spatial", out, (s,),
                    lambda g: (g.transpose(0, 2, 3, 1).reshape(n, length, c),), 0)


def mamba_block_forward(x: Tensor, p: SsmParams) -> Tensor:
    """Gated Mamba block over an (n, L, d_model) or (L, d_model) sequence."""
    batched = x.data.ndim == 3
    if not batched:
        x = tc.apply("unsqueeze", x.data[None], (x,), lambda g: (g[0],), 0)
    if x.shape[1] < 1:
        raise ShapeError("mamba block needs a sequence of length >= 1")
    di, s = p.d_inner, p.n_state
    main, gate = tc.split(tc.linear(x, p.in_proj_w, p.in_proj_b), [di, di], axis=2)
    xc = tc.silu(tc.causal_conv1d(main, p.conv_w, p.conv_b))
    bb, cc, dt_raw = tc.split(tc.linear(xc, p.x_proj_w, p.x_proj_b), [s, s, 1], axis=2)
    delta = tc.softplus(tc.linear(dt_raw, p.dt_proj_w, p.dt_proj_b))
    y = selective_scan(xc, delta, tc.neg_exp(p.a_log), bb, cc, p.d_skip)
    out = tc.linear(tc.mul(y, tc.silu(gate)), p.out_proj_w, p.out_proj_b)
    if not batched:
        out = tc.apply("squeeze", out.data[0], (out,), lambda g: (g[None],), 0)
    return out

