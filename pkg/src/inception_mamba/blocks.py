"""Network blocks: Inception-Mamba module, feature calibration, bottleneck,
decoder, segmentation head and a small ResNet-style backbone.

Every forward function takes its parameters as a :class:`~.params.Scoped`
view; the matching ``init_*`` function returns the arrays with names relative
to that scope.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .params import Scoped, prefixed
from .ssm import SsmConfig, SsmParams, init_ssm, mamba_block_forward, sequence_to_spatial, spatial_to_sequence
from .tensor_core import ShapeError, Tensor

BRANCHES = ("identity", "square", "band_row", "band_col", "mamba")
DECODER_POSITIONS = ("first", "second", "third")


# --- configuration --------------------------------------------------------------------

def default_split(channels: int) -> tuple[int, int, int, int, int]:
    """Equal five-way split; the remainder goes to the identity branch."""
    base, extra = divmod(channels, 5)
    return (base + extra, base, base, base, base)


@dataclass(frozen=True)
class ImmConfig:
    c_total: int
    split: tuple[int, ...] = ()
    square_k: int = 3
    band_k: int = 11
    ssm: SsmConfig = field(default_factory=SsmConfig)
    enabled: tuple[bool, ...] = (True, True, True, True, True)
    order: tuple[str, ...] = BRANCHES

    def __post_init__(self):
        if not self.split:
            object.__setattr__(self, "split", default_split(self.c_total))
        if len(self.split) != 5 or sum(self.split) != self.c_total or min(self.split) < 0:
            raise ValueError(f"IMM split {self.split} must be five non-negative counts summing to {self.c_total}")
        if self.square_k % 2 == 0 or self.band_k % 2 == 0:
            raise ValueError("IMM kernel sizes must be odd")
        if sorted(self.order) != sorted(BRANCHES):
            raise ValueError(f"IMM order must be a permutation of {BRANCHES}")
        if len(self.enabled) != 5:
            raise ValueError("IMM needs five branch toggles")

    def with_channels(self, c_total: int) -> "ImmConfig":
        return replace(self, c_total=c_total, split=())

    def with_toggles(self, convs: bool, mamba: bool) -> "ImmConfig":
        return replace(self, enabled=tuple(
            mamba if b == "mamba" else (convs if b != "identity" else True) for b in self.order))

    def active(self) -> list[tuple[str, int]]:
        """(branch, channels) for branches that own parameters."""
        return [(b, c) for b, c, on in zip(self.order, self.split, self.enabled)
                if on and c > 0 and b != "identity"]

    @property
    def any_active(self) -> bool:
        return bool(self.active())


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (16, 32, 48)
    blocks_per_stage: int = 1

    def __post_init__(self):
        if self.stem_channels < 1 or min(self.stage_channels) < 1 or self.blocks_per_stage < 1:
            raise ValueError("backbone widths and depth must be positive")


RESNET50_SHAPES = BackboneConfig(stem_channels=64, stage_channels=(256, 512, 1024), blocks_per_stage=1)


# --- initialisation helpers -----------------------------------------------------------

def init_conv(rng: np.random.Generator, c_out: int, c_in_per_group: int, kh: int, kw: int) -> dict[str, np.ndarray]:
    """Kaiming-uniform weights (variance 2 / fan_in) and zero bias."""
    fan_in = c_in_per_group * kh * kw
    bound = math.sqrt(6.0 / fan_in)
    return {"weight": rng.uniform(-bound, bound, size=(c_out, c_in_per_group, kh, kw)),
            "bias": np.zeros(c_out)}


def init_norm(channels: int) -> dict[str, np.ndarray]:
    return {"gamma": np.ones(channels), "beta": np.zeros(channels)}


def delta_kernel(channels: int, kh: int, kw: int) -> np.ndarray:
    w = np.zeros((channels, 1, kh, kw))
    w[:, 0, kh // 2, kw // 2] = 1.0
    return w


def _conv(p: Scoped, name: str, x: Tensor, **kw) -> Tensor:
    return tc.conv2d(x, p[f"{name}.weight"], p.get(f"{name}.bias"), **kw)


def _conv_bn_relu(p: Scoped, x: Tensor, stride: int = 1) -> Tensor:
    y = _conv(p, "conv", x, stride=stride, padding=1)
    return tc.relu(tc.batchnorm2d(y, p["norm.gamma"], p["norm.beta"], p.norm("norm"), p.training))


def _init_conv_bn(rng, c_in, c_out, k=3) -> dict[str, np.ndarray]:
    return {**prefixed("conv", init_conv(rng, c_out, c_in, k, k)), **prefixed("norm", init_norm(c_out))}


def _upsample2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return tc.bilinear_resize(x, 2 * h, 2 * w)


# --- Inception-Mamba module -----------------------------------------------------------

def _branch_kernel(cfg: ImmConfig, branch: str) -> tuple[int, int]:
    return {"square": (cfg.square_k, cfg.square_k), "band_row": (1, cfg.band_k),
            "band_col": (cfg.band_k, 1)}[branch]


def init_imm(cfg: ImmConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for branch, c in cfg.active():
        if branch == "mamba":
            arrays.update(prefixed("mamba", init_ssm(c, cfg.ssm, rng)))
        else:
            arrays.update(prefixed(branch, init_conv(rng, c, 1, *_branch_kernel(cfg, branch))))
    return arrays


def imm_branch(branch: str, x: Tensor, cfg: ImmConfig, p: Scoped) -> Tensor:
    """Apply one IMM branch to its channel subset."""
    if branch == "mamba":
        n, c, h, w = x.shape
        seq = mamba_block_forward(spatial_to_sequence(x), SsmParams.from_scope(p.scoped("mamba")))
        return sequence_to_spatial(seq, h, w)
    kh, kw = _branch_kernel(cfg, branch)
    return _conv(p, branch, x, padding=(kh // 2, kw // 2), groups=x.shape[1])


def imm_forward(x: Tensor, cfg: ImmConfig, p: Scoped) -> Tensor:
    """Split channels into five subsets, transform each, concatenate in order.

    Disabled branches pass their subset through unchanged.
    """
    if x.shape[1] != cfg.c_total:
        raise ShapeError(f"IMM expects {cfg.c_total} channels, got {x.shape[1]}")
    outs = []
    for branch, part, on in zip(cfg.order, tc.split_channels(x, cfg.split), cfg.enabled):
        if part.shape[1] == 0:
            continue
        if branch == "identity" or not on:
            outs.append(part)
            continue
        with tc.scope(branch):
            outs.append(imm_branch(branch, part, cfg, p))
    return tc.concat_channels(outs)


# --- feature calibration --------------------------------------------------------------

def init_fcm(channels: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {**prefixed("smooth", init_conv(rng, channels, 1, 3, 3)),
            **prefixed("sub", init_conv(rng, channels, 1, 3, 3)),
            **prefixed("mul", init_conv(rng, channels, 1, 3, 3)),
            **prefixed("proj", init_conv(rng, channels, 2 * channels, 1, 1))}


def fcm_forward(f: Tensor, p: Scoped) -> Tensor:
    """Residual calibration: ``f + proj([sub_conv(f - f_hat), mul_conv(f * f_hat)])``.

    ``f_hat`` is ``f`` smoothed by a stride-2 depthwise conv (replicate
    padding) and resized back to the input resolution.
    """
    n, c, h, w = f.shape
    if h < 2 or w < 2:
        raise ShapeError(f"feature calibration needs spatial size >= 2, got {h}x{w}")
    coarse = _conv(p, "smooth", f, stride=2, padding=1, padding_mode="replicate", groups=c)
    f_hat = tc.bilinear_resize(coarse, h, w)
    detail = _conv(p, "sub", tc.sub(f, f_hat), padding=1, groups=c)
    blob = _conv(p, "mul", tc.mul(f, f_hat), padding=1, groups=c)
    return tc.add(f, _conv(p, "proj", tc.concat_channels([detail, blob])))


# --- bottleneck -----------------------------------------------------------------------

@dataclass(frozen=True)
class BottleneckConfig:
    stage_channels: tuple[int, int, int]
    c_out: int
    use_fcm: bool
    imm: ImmConfig


def init_bottleneck(cfg: BottleneckConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    if cfg.use_fcm:
        for i, c in enumerate(cfg.stage_channels, start=1):
            arrays.update(prefixed(f"fcm{i}", init_fcm(c, rng)))
    arrays.update(prefixed("fuse", init_conv(rng, cfg.c_out, sum(cfg.stage_channels), 1, 1)))
    if cfg.imm.any_active:
        arrays.update(prefixed("imm", init_imm(cfg.imm, rng)))
    return arrays


def bottleneck_forward(x1: Tensor, x2: Tensor, x3: Tensor, cfg: BottleneckConfig, p: Scoped) -> Tensor:
    """Fuse three backbone stages at the coarsest (1/16) scale."""
    h, w = x3.shape[2:]
    if x1.shape[2:] != (4 * h, 4 * w) or x2.shape[2:] != (2 * h, 2 * w):
        raise ShapeError(f"stage sizes {x1.shape[2:]}, {x2.shape[2:]}, {x3.shape[2:]} are not 4:2:1")
    feats = []
    for i, x in enumerate((x1, x2, x3), start=1):
        if x.shape[2:] != (h, w):
            x = tc.bilinear_resize(x, h, w)
        if cfg.use_fcm:
            with tc.scope(f"fcm{i}"):
                x = fcm_forward(x, p.scoped(f"fcm{i}"))
        feats.append(x)
    with tc.scope("fuse"):
        fused = _conv(p, "fuse", tc.concat_channels(feats))
    if not cfg.imm.any_active:
        return fused
    with tc.scope("imm"):
        context = imm_forward(fused, cfg.imm, p.scoped("imm"))
    return tc.add(fused, context)


# --- decoder and head -----------------------------------------------------------------

@dataclass(frozen=True)
class DecoderConfig:
    c_in: int
    c_out: int
    use_imm: bool
    imm: ImmConfig
    position: str = "second"

    def __post_init__(self):
        if self.position not in DECODER_POSITIONS:
            raise ValueError(f"decoder IMM position must be one of {DECODER_POSITIONS}")

    @property
    def imm_stage(self) -> int | None:
        return DECODER_POSITIONS.index(self.position) if self.use_imm else None

    def stage_inputs(self) -> list[int]:
        return [self.c_in, self.c_out, self.c_out]

    def imm_config(self) -> ImmConfig:
        return self.imm.with_channels(self.stage_inputs()[self.imm_stage])


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for i, (name, c_in) in enumerate(zip("abc", cfg.stage_inputs())):
        if cfg.imm_stage == i:
            arrays.update(prefixed("imm", init_imm(cfg.imm_config(), rng)))
        arrays.update(prefixed(name, _init_conv_bn(rng, c_in, cfg.c_out)))
    return arrays


def decoder_forward(b: Tensor, cfg: DecoderConfig, p: Scoped) -> Tensor:
    """Three conv-norm-relu + 2x upsampling stages: 1/16 -> 1/2 resolution."""
    x = b
    for i, name in enumerate("abc"):
        if cfg.imm_stage == i:
            with tc.scope("imm"):
                x = imm_forward(x, cfg.imm_config(), p.scoped("imm"))
        with tc.scope(name):
            x = _upsample2(_conv_bn_relu(p.scoped(name), x))
    return x


def init_head(c_in: int, num_classes: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {**_init_conv_bn(rng, c_in, c_in), **prefixed("classifier", init_conv(rng, num_classes, c_in, 1, 1))}


def seg_head(fused: Tensor, num_classes: int, p: Scoped) -> Tensor:
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    x = _upsample2(_conv_bn_relu(p, fused))
    return _conv(p, "classifier", x)


# --- backbone -------------------------------------------------------------------------

def init_residual(c_in: int, c_out: int, stride: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays = {**prefixed("conv1", init_conv(rng, c_out, c_in, 3, 3)), **prefixed("norm1", init_norm(c_out)),
              **prefixed("conv2", init_conv(rng, c_out, c_out, 3, 3)), **prefixed("norm2", init_norm(c_out))}
    if stride != 1 or c_in != c_out:
        arrays.update(prefixed("short.conv", init_conv(rng, c_out, c_in, 1, 1)))
        arrays.update(prefixed("short.norm", init_norm(c_out)))
    return arrays


def residual_forward(x: Tensor, stride: int, p: Scoped) -> Tensor:
    def bn(name, t):
        return tc.batchnorm2d(t, p[f"{name}.gamma"], p[f"{name}.beta"], p.norm(name), p.training)

    y = tc.relu(bn("norm1", _conv(p, "conv1", x, stride=stride, padding=1)))
    y = bn("norm2", _conv(p, "conv2", y, padding=1))
    if "short.conv.weight" in p:
        shortcut = bn("short.norm", _conv(p, "short.conv", x, stride=stride))
    else:
        shortcut = x
    return tc.relu(tc.add(y, shortcut))


def _stage_plan(cfg: BackboneConfig):
    """(stage index, block index, c_in, c_out, stride) for every residual block."""
    c_prev = cfg.stem_channels
    for s, c in enumerate(cfg.stage_channels, start=1):
        for blk in range(cfg.blocks_per_stage):
            stride = 2 if (s > 1 and blk == 0) else 1
            yield s, blk, (c_prev if blk == 0 else c), c, stride
        c_prev = c


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays = {**prefixed("stem.conv", init_conv(rng, cfg.stem_channels, 3, 7, 7)),
              **prefixed("stem.norm", init_norm(cfg.stem_channels))}
    for s, blk, c_in, c_out, stride in _stage_plan(cfg):
        arrays.update(prefixed(f"stage{s}.{blk}", init_residual(c_in, c_out, stride, rng)))
    return arrays


def backbone_forward(img: Tensor, cfg: BackboneConfig, p: Scoped) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Stem (1/2) and three residual stages (1/4, 1/8, 1/16)."""
    n, c, h, w = img.shape
    if h % 16 or w % 16:
        raise ShapeError(f"input size {h}x{w} must be divisible by 16")
    with tc.scope("stem"):
        sp = p.scoped("stem")
        x0 = tc.relu(tc.batchnorm2d(_conv(sp, "conv", img, stride=2, padding=3),
                                    sp["norm.gamma"], sp["norm.beta"], sp.norm("norm"), p.training))
        x = tc.maxpool2d(x0, 2, 2)
    stages = []
    for s in (1, 2, 3):
        for stage, blk, _, _, stride in _stage_plan(cfg):
            if stage != s:
                continue
            with tc.scope(f"stage{s}.{blk}"):
                x = residual_forward(x, stride, p.scoped(f"stage{s}.{blk}"))
        stages.append(x)
    return (x0, *stages)
