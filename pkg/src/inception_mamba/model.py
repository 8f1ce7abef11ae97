"""Full segmentation network, its configuration, initialisation and checkpoints."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .blocks import (BRANCHES, DECODER_POSITIONS, BackboneConfig, BottleneckConfig, DecoderConfig, ImmConfig,
                     backbone_forward, bottleneck_forward, decoder_forward, init_backbone, init_bottleneck,
                     init_conv, init_decoder, init_head, seg_head)
from .params import ParamStore, prefixed
from .ssm import SsmConfig
from .tensor_core import NormStats, ShapeError, Tensor

# Table-4 style ablation rows -> (use_fcm, use_imm_convs, use_imm_mamba, use_decoder_imm, use_stem_skip)
ABLATION_ROWS: dict[int, tuple[bool, bool, bool, bool, bool]] = {
    1: (False, False, False, False, False),
    2: (True, False, False, False, False),
    3: (False, True, False, False, False),
    4: (False, False, True, False, False),
    5: (False, True, True, False, False),
    11: (True, True, True, False, False),
    12: (True, True, True, True, False),
    13: (True, True, True, True, True),
}
TOGGLES = ("use_fcm", "use_imm_convs", "use_imm_mamba", "use_decoder_imm", "use_stem_skip")


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 64
    input_w: int = 64
    num_classes: int = 2
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (16, 32, 48)
    blocks_per_stage: int = 1
    c_bottleneck: int = 40
    c_dec: int = 16
    square_k: int = 3
    band_k: int = 11
    ssm_expand: int = 2
    ssm_n_state: int = 16
    ssm_conv_w: int = 4
    scan_direction: str = "forward"
    imm_order: tuple[str, ...] = BRANCHES
    use_fcm: bool = True
    use_imm_convs: bool = True
    use_imm_mamba: bool = True
    use_decoder_imm: bool = True
    use_stem_skip: bool = True
    imm_decoder_position: str = "second"
    seed: int = 0

    def __post_init__(self):
        if self.input_h % 16 or self.input_w % 16 or self.input_h <= 0 or self.input_w <= 0:
            raise ValueError(f"input size {self.input_h}x{self.input_w} must be positive multiples of 16")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.imm_decoder_position not in DECODER_POSITIONS:
            raise ValueError(f"imm_decoder_position must be one of {DECODER_POSITIONS}")
        if len(self.stage_channels) != 3:
            raise ValueError("stage_channels needs three entries")
        if self.c_bottleneck < 1 or self.c_dec < 1:
            raise ValueError("c_bottleneck and c_dec must be positive")
        # constructing the sub-configs validates kernel sizes, order and scan settings
        self.imm_template(self.c_bottleneck)

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.stem_channels, tuple(self.stage_channels), self.blocks_per_stage)

    @property
    def ssm(self) -> SsmConfig:
        return SsmConfig(self.ssm_expand, self.ssm_n_state, self.ssm_conv_w, self.scan_direction)

    def imm_template(self, channels: int) -> ImmConfig:
        return ImmConfig(c_total=channels, square_k=self.square_k, band_k=self.band_k, ssm=self.ssm,
                         order=tuple(self.imm_order))

    @property
    def bottleneck(self) -> BottleneckConfig:
        imm = self.imm_template(self.c_bottleneck).with_toggles(self.use_imm_convs, self.use_imm_mamba)
        return BottleneckConfig(tuple(self.stage_channels), self.c_bottleneck, self.use_fcm, imm)

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig(self.c_bottleneck, self.c_dec, self.use_decoder_imm,
                             self.imm_template(self.c_dec), self.imm_decoder_position)

    # flat key=value form, used by checkpoints and run configs
    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            elif isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        defaults = cls()
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name].strip()
            ref = getattr(defaults, f.name)
            try:
                if isinstance(ref, bool):
                    if raw.lower() not in ("true", "false", "1", "0"):
                        raise ValueError
                    kwargs[f.name] = raw.lower() in ("true", "1")
                elif isinstance(ref, tuple):
                    parts = tuple(p.strip() for p in raw.split(",") if p.strip())
                    kwargs[f.name] = parts if f.name == "imm_order" else tuple(int(p) for p in parts)
                elif isinstance(ref, int):
                    kwargs[f.name] = int(raw)
                else:
                    kwargs[f.name] = raw
            except ValueError:
                raise ValueError(f"{f.name}: cannot parse {raw!r}") from None
        return cls(**kwargs)


def ablation_config(row: int, base: ModelConfig | None = None) -> ModelConfig:
    """Config with the block toggles of one ablation row (1-5, 11-13)."""
    if row not in ABLATION_ROWS:
        raise ValueError(f"ablation row {row} not reproducible; choose from {sorted(ABLATION_ROWS)}")
    return replace(base or ModelConfig(), **dict(zip(TOGGLES, ABLATION_ROWS[row])))


def toy_config(**overrides) -> ModelConfig:
    """Smallest sensible network: 32x32 input, narrow widths."""
    base = ModelConfig(input_h=32, input_w=32, stem_channels=8, stage_channels=(8, 12, 16), c_bottleneck=10,
                       c_dec=10, band_k=5, ssm_n_state=4)
    return replace(base, **overrides)


def paper_shapes_config(**overrides) -> ModelConfig:
    """224x224 input with ResNet-50 stage widths; for cost accounting."""
    base = ModelConfig(input_h=224, input_w=224, stem_channels=64, stage_channels=(256, 512, 1024),
                       c_bottleneck=128, c_dec=64)
    return replace(base, **overrides)


# --- parameters -----------------------------------------------------------------------

_PARTS = ("backbone", "bottleneck", "decoder", "skip", "head")


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParamStore:
    """Fresh parameter store; each top-level part draws from its own seeded stream."""
    seed = cfg.seed if seed is None else seed

    def rng(part):
        return np.random.default_rng([seed, _PARTS.index(part)])

    arrays = {}
    arrays.update(prefixed("backbone", init_backbone(cfg.backbone, rng("backbone"))))
    arrays.update(prefixed("bottleneck", init_bottleneck(cfg.bottleneck, rng("bottleneck"))))
    arrays.update(prefixed("decoder", init_decoder(cfg.decoder, rng("decoder"))))
    if cfg.use_stem_skip:
        arrays.update(prefixed("skip", init_conv(rng("skip"), cfg.c_dec, cfg.stem_channels, 1, 1)))
    arrays.update(prefixed("head", init_head(cfg.c_dec, cfg.num_classes, rng("head"))))
    return ParamStore(arrays)


def model_forward(img: Tensor, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """Logits (n, num_classes, h, w) for an (n, 3, h, w) image batch."""
    n, c, h, w = img.shape
    if c != 3:
        raise ShapeError(f"expected 3 input channels, got {c}")
    if h % 16 or w % 16:
        raise ShapeError(f"input size {h}x{w} must be divisible by 16")
    with tc.scope("backbone"):
        x0, x1, x2, x3 = backbone_forward(img, cfg.backbone, params.scoped("backbone"))
    with tc.scope("bottleneck"):
        b = bottleneck_forward(x1, x2, x3, cfg.bottleneck, params.scoped("bottleneck"))
    with tc.scope("decoder"):
        y = decoder_forward(b, cfg.decoder, params.scoped("decoder"))
    if cfg.use_stem_skip:
        with tc.scope("skip"):
            sk = params.scoped("skip")
            y = tc.add(y, tc.conv2d(x0, sk["weight"], sk["bias"]))
    with tc.scope("head"):
        return seg_head(y, cfg.num_classes, params.scoped("head"))


# --- checkpoints ----------------------------------------------------------------------

MAGIC = b"IMCK"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f8"): b"f8", np.dtype("<f4"): b"f4", np.dtype("<i8"): b"i8"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    norms: dict[str, NormStats] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] | None = None
    rng_state: str = ""
    version: int = VERSION

    @classmethod
    def from_store(cls, cfg: ModelConfig, store: ParamStore, optimizer=None, rng_state: str = "") -> "Checkpoint":
        norms = {k: NormStats(v.running_mean.copy(), v.running_var.copy(), v.momentum, v.eps)
                 for k, v in store.norms.items()}
        return cls(cfg, {k: v.copy() for k, v in store.arrays().items()}, norms, optimizer, rng_state)

    def to_store(self) -> ParamStore:
        norms = {k: NormStats(v.running_mean.copy(), v.running_var.copy(), v.momentum, v.eps)
                 for k, v in self.norms.items()}
        return ParamStore(self.params, norms)


def _config_text(cfg: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_items().items())


def _parse_config_text(text: str) -> ModelConfig:
    items = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            items[key.strip()] = value
    return ModelConfig.from_items(items)


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)) + raw + _DTYPE_TAGS[dt] + struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _records(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    recs = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    for k, st in ckpt.norms.items():
        recs.append((f"norm/{k}/mean", st.running_mean))
        recs.append((f"norm/{k}/var", st.running_var))
        recs.append((f"norm/{k}/hyper", np.array([st.momentum, st.eps])))
    for k, v in (ckpt.optimizer or {}).items():
        recs.append((f"opt/{k}", v))
    return recs


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", ckpt.version))
    for text in (_config_text(ckpt.config), ckpt.rng_state):
        raw = text.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
    recs = _records(ckpt)
    buf.write(struct.pack("<I", len(recs)))
    for name, arr in recs:
        _write_tensor(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect``, verify tensor names and shapes against that config."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<I")
    cfg = _parse_config_text(r.take(n).decode("utf-8"))
    (n,) = r.unpack("<I")
    rng_state = r.take(n).decode("utf-8")
    (count,) = r.unpack("<I")
    params, norm_parts, optimizer = {}, {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag = r.take(2)
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag!r}")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        dt = _TAG_DTYPES[tag]
        arr = np.frombuffer(r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize), dtype=dt).reshape(dims).copy()
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = arr
        elif kind == "norm":
            layer, _, part = rest.rpartition("/")
            norm_parts.setdefault(layer, {})[part] = arr
        elif kind == "opt":
            optimizer[rest] = arr
        else:
            raise CheckpointError(f"unknown record {name!r}")
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    norms = {k: NormStats(v["mean"], v["var"], float(v["hyper"][0]), float(v["hyper"][1]))
             for k, v in norm_parts.items()}
    ckpt = Checkpoint(cfg, params, norms, optimizer or None, rng_state, version)
    if expect is not None:
        check_compatible(ckpt, expect)
    return ckpt


def check_compatible(ckpt: Checkpoint, cfg: ModelConfig) -> None:
    want = {k: t.shape for k, t in init_params(cfg).tensors.items()}
    for name, shape in want.items():
        if name not in ckpt.params:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if ckpt.params[name].shape != shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {ckpt.params[name].shape}, config {shape}")
    extra = sorted(set(ckpt.params) - set(want))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
