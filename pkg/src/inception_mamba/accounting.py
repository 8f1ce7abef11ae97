"""Analytic parameter and multiply-accumulate counts derived from a ModelConfig.

Conventions: a conv costs ``k_h*k_w*(c_in/groups)*c_out`` MACs per output
pixel, a linear map ``in*out`` per position, the selective scan
``d_inner*(2*n_state+1)`` per position, and every pointwise, normalisation,
pooling or resampling op one MAC per output scalar.  FLOPs are 2 x MACs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import ImmConfig
from .model import ModelConfig
from .ssm import SsmConfig


@dataclass
class LayerCost:
    name: str
    params: int
    macs: int
    shape: tuple[int, ...]
    kind: str = "pointwise"  # conv, norm, pointwise or mamba


@dataclass
class CostReport:
    input_size: tuple[int, int]
    batch: int = 1
    rows: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "kind", "params", "macs", "flops", "output_shape"])
            for r in self.rows:
                w.writerow([r.name, r.kind, r.params, r.macs, 2 * r.macs, "x".join(map(str, r.shape))])
            w.writerow(["total", "", self.params, self.macs, self.flops, ""])

    def table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'params':>10}  {'macs':>14}  output"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>10}  {r.macs:>14}  {'x'.join(map(str, r.shape))}")
        lines.append(f"{'total':<{width}}  {self.params:>10}  {self.macs:>14}")
        lines.append(f"params {self.params / 1e6:.4f} M   MACs {self.macs / 1e9:.4f} G   "
                     f"FLOPs {self.flops / 1e9:.4f} G   input {self.input_size[0]}x{self.input_size[1]}")
        return "\n".join(lines)


def conv_cost(name: str, c_in: int, c_out: int, k: tuple[int, int], hw: tuple[int, int], n: int = 1,
              stride: int = 1, padding: tuple[int, int] = (0, 0), groups: int = 1, bias: bool = True) -> LayerCost:
    kh, kw = k
    ho = (hw[0] + 2 * padding[0] - kh) // stride + 1
    wo = (hw[1] + 2 * padding[1] - kw) // stride + 1
    params = kh * kw * (c_in // groups) * c_out + (c_out if bias else 0)
    return LayerCost(name, params, kh * kw * (c_in // groups) * c_out * ho * wo * n, (n, c_out, ho, wo), "conv")


def mamba_param_count(d_model: int, cfg: SsmConfig) -> int:
    di, s, k = cfg.d_inner(d_model), cfg.n_state, cfg.conv_w
    return ((d_model * 2 * di + 2 * di)          # in_proj
            + (di * k + di)                      # causal conv
            + (di * (2 * s + 1) + 2 * s + 1)     # x_proj
            + (di + di)                          # dt_proj
            + di * s + di                        # a_log, skip
            + (di * d_model + d_model))          # out_proj


def mamba_macs(n: int, length: int, d_model: int, cfg: SsmConfig) -> int:
    di, s, k = cfg.d_inner(d_model), cfg.n_state, cfg.conv_w
    pos = n * length
    return (pos * d_model * 2 * di      # in_proj
            + pos * di * k              # causal conv
            + pos * di                  # silu
            + pos * di * (2 * s + 1)    # x_proj
            + pos * di                  # dt_proj
            + pos * di                  # softplus
            + di * s                    # A = -exp(a_log)
            + pos * di * (2 * s + 1)    # selective scan
            + 2 * pos * di              # silu(gate) and gating product
            + pos * di * d_model)       # out_proj


class _Walker:
    def __init__(self, n: int):
        self.n = n
        self.rows: list[LayerCost] = []

    def conv(self, name, c_in, c_out, k, hw, stride=1, padding=(0, 0), groups=1) -> tuple[int, int]:
        row = conv_cost(name, c_in, c_out, k, hw, self.n, stride, padding, groups)
        self.rows.append(row)
        return row.shape[2], row.shape[3]

    def pointwise(self, name, c, hw, params=0, kind="pointwise") -> None:
        self.rows.append(LayerCost(name, params, self.n * c * hw[0] * hw[1], (self.n, c, *hw), kind))

    def norm(self, name, c, hw) -> None:
        self.pointwise(name, c, hw, params=2 * c, kind="norm")

    def conv_bn_relu(self, name, c_in, c_out, hw, stride=1) -> tuple[int, int]:
        hw = self.conv(f"{name}.conv", c_in, c_out, (3, 3), hw, stride, (1, 1))
        self.norm(f"{name}.norm", c_out, hw)
        self.pointwise(f"{name}.relu", c_out, hw)
        return hw

    def imm(self, name, cfg: ImmConfig, hw) -> None:
        kernels = {"square": (cfg.square_k,) * 2, "band_row": (1, cfg.band_k), "band_col": (cfg.band_k, 1)}
        for branch, c in cfg.active():
            if branch == "mamba":
                length = hw[0] * hw[1]
                self.rows.append(LayerCost(f"{name}.mamba", mamba_param_count(c, cfg.ssm),
                                           mamba_macs(self.n, length, c, cfg.ssm), (self.n, c, *hw), "mamba"))
            else:
                kh, kw = kernels[branch]
                self.conv(f"{name}.{branch}", c, c, (kh, kw), hw, 1, (kh // 2, kw // 2), groups=c)

    def fcm(self, name, c, hw) -> None:
        coarse = self.conv(f"{name}.smooth", c, c, (3, 3), hw, 2, (1, 1), groups=c)
        del coarse
        self.pointwise(f"{name}.resize", c, hw)
        self.pointwise(f"{name}.sub", c, hw)
        self.pointwise(f"{name}.mul", c, hw)
        self.conv(f"{name}.sub_conv", c, c, (3, 3), hw, 1, (1, 1), groups=c)
        self.conv(f"{name}.mul_conv", c, c, (3, 3), hw, 1, (1, 1), groups=c)
        self.conv(f"{name}.proj", 2 * c, c, (1, 1), hw)
        self.pointwise(f"{name}.residual", c, hw)


def cost_report(cfg: ModelConfig, input_size: tuple[int, int] | None = None, batch: int = 1) -> CostReport:
    """Per-layer parameters and MACs of :func:`~.model.model_forward` on one input size."""
    h, w = input_size or (cfg.input_h, cfg.input_w)
    if h % 16 or w % 16:
        raise ValueError(f"input size {h}x{w} must be divisible by 16")
    wk = _Walker(batch)
    bb = cfg.backbone

    # backbone
    hw0 = wk.conv("backbone.stem.conv", 3, bb.stem_channels, (7, 7), (h, w), 2, (3, 3))
    wk.norm("backbone.stem.norm", bb.stem_channels, hw0)
    wk.pointwise("backbone.stem.relu", bb.stem_channels, hw0)
    hw = (hw0[0] // 2, hw0[1] // 2)
    wk.pointwise("backbone.stem.maxpool", bb.stem_channels, hw)
    stage_hw = []
    c_prev = bb.stem_channels
    for s, c in enumerate(bb.stage_channels, start=1):
        for blk in range(bb.blocks_per_stage):
            stride = 2 if (s > 1 and blk == 0) else 1
            c_in = c_prev if blk == 0 else c
            name = f"backbone.stage{s}.{blk}"
            out = wk.conv(f"{name}.conv1", c_in, c, (3, 3), hw, stride, (1, 1))
            wk.norm(f"{name}.norm1", c, out)
            wk.pointwise(f"{name}.relu1", c, out)
            wk.conv(f"{name}.conv2", c, c, (3, 3), out, 1, (1, 1))
            wk.norm(f"{name}.norm2", c, out)
            if stride != 1 or c_in != c:
                wk.conv(f"{name}.short.conv", c_in, c, (1, 1), hw, stride)
                wk.norm(f"{name}.short.norm", c, out)
            wk.pointwise(f"{name}.add", c, out)
            wk.pointwise(f"{name}.relu2", c, out)
            hw = out
        stage_hw.append(hw)
        c_prev = c

    # bottleneck
    bn = cfg.bottleneck
    hw16 = stage_hw[2]
    for i, (c, shw) in enumerate(zip(bn.stage_channels, stage_hw), start=1):
        if shw != hw16:
            wk.pointwise(f"bottleneck.resize{i}", c, hw16)
        if bn.use_fcm:
            wk.fcm(f"bottleneck.fcm{i}", c, hw16)
    wk.conv("bottleneck.fuse", sum(bn.stage_channels), bn.c_out, (1, 1), hw16)
    if bn.imm.any_active:
        wk.imm("bottleneck.imm", bn.imm, hw16)
        wk.pointwise("bottleneck.add", bn.c_out, hw16)

    # decoder
    dec = cfg.decoder
    hw = hw16
    for i, (stage, c_in) in enumerate(zip("abc", dec.stage_inputs())):
        if dec.imm_stage == i:
            wk.imm("decoder.imm", dec.imm_config(), hw)
        wk.conv_bn_relu(f"decoder.{stage}", c_in, dec.c_out, hw)
        hw = (2 * hw[0], 2 * hw[1])
        wk.pointwise(f"decoder.{stage}.upsample", dec.c_out, hw)

    if cfg.use_stem_skip:
        wk.conv("skip", bb.stem_channels, cfg.c_dec, (1, 1), hw0)
        wk.pointwise("skip.add", cfg.c_dec, hw0)

    wk.conv_bn_relu("head", cfg.c_dec, cfg.c_dec, hw0)
    wk.pointwise("head.upsample", cfg.c_dec, (h, w))
    wk.conv("head.classifier", cfg.c_dec, cfg.num_classes, (1, 1), (h, w))
    return CostReport((h, w), batch, wk.rows)


def count_params(cfg: ModelConfig) -> CostReport:
    """Per-layer parameter rows (MACs evaluated at the config's own input size)."""
    return cost_report(cfg)


def count_flops(cfg: ModelConfig, input_size: tuple[int, int] | None = None, batch: int = 1) -> CostReport:
    return cost_report(cfg, input_size, batch)
