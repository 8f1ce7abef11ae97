"""Flat ``key=value`` run configuration covering model, training plan and data generator."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import BlobSpec
from .model import ModelConfig
from .training import TrainPlan

PRECISIONS = ("float64", "float32")

HELP = {
    # model
    "input_h": "network input height (multiple of 16)",
    "input_w": "network input width (multiple of 16)",
    "num_classes": "segmentation classes including background",
    "stem_channels": "backbone stem width",
    "stage_channels": "widths of the three residual stages, comma separated",
    "blocks_per_stage": "residual blocks per stage",
    "c_bottleneck": "channels leaving the bottleneck fusion conv",
    "c_dec": "decoder and head width",
    "square_k": "IMM square depthwise kernel (odd)",
    "band_k": "IMM band kernel length (odd)",
    "ssm_expand": "Mamba inner expansion factor",
    "ssm_n_state": "Mamba state size per inner channel",
    "ssm_conv_w": "Mamba causal conv width",
    "scan_direction": "selective scan direction (forward)",
    "imm_order": "IMM branch order over the channel subsets",
    "use_fcm": "feature calibration on each stage in the bottleneck",
    "use_imm_convs": "depthwise conv branches of the bottleneck IMM",
    "use_imm_mamba": "Mamba branch of the bottleneck IMM",
    "use_decoder_imm": "IMM inside the decoder",
    "use_stem_skip": "1x1-projected stem features added before the head",
    "imm_decoder_position": "decoder stage hosting the IMM: first, second or third",
    "seed": "parameter initialisation seed",
    # training
    "batch_size": "minibatch size",
    "epochs": "training epochs",
    "lr": "Adam learning rate",
    "w_ce": "cross-entropy weight in the combined loss",
    "w_dice": "Dice-loss weight in the combined loss",
    "dice_smooth": "Dice-loss smoothing constant",
    "augment_rotate": "random right-angle rotations",
    "augment_flip": "random horizontal/vertical flips",
    "folds": "cross-validation folds",
    "repeats": "cross-validation repeats",
    "val_fraction": "held-out fraction when not cross-validating (0 = validate on train)",
    "train_seed": "shuffling and augmentation seed",
    # data
    "data_image_size": "synthetic image side length",
    "data_blobs_min": "minimum blobs per image",
    "data_blobs_max": "maximum blobs per image",
    "data_radius_min": "minimum ellipse semi-axis (px)",
    "data_radius_max": "maximum ellipse semi-axis (px)",
    "data_blur_sigma": "Gaussian blur of blob boundaries (px)",
    "data_clutter_density": "probability a pixel seeds a clutter speckle",
    "data_overlap_prob": "probability a blob overlaps its predecessor",
    "data_seed": "corpus seed",
    # numerics
    "precision": "scalar type: float64 or float32",
}


class ConfigError(ValueError):
    """Unknown key or unparsable value; the message names the key."""


def _plan_key(name: str) -> str:
    return "train_seed" if name == "seed" else name


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    blobs: BlobSpec = field(default_factory=BlobSpec)
    precision: str = "float64"

    def items(self) -> dict[str, str]:
        out = dict(self.model.to_items())
        for f in fields(self.plan):
            out[_plan_key(f.name)] = _fmt(getattr(self.plan, f.name))
        for f in fields(self.blobs):
            out[f"data_{f.name}"] = _fmt(getattr(self.blobs, f.name))
        out["precision"] = self.precision
        return out

    def dump(self, with_help: bool = True) -> str:
        lines = []
        for k, v in self.items().items():
            if with_help:
                lines.append(f"# {HELP[k]}")
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw: str, ref):
    raw = raw.strip()
    try:
        if isinstance(ref, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(ref, int):
            return int(raw)
        if isinstance(ref, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(ref).__name__}") from None


def parse_items(items: dict[str, str]) -> RunConfig:
    unknown = sorted(set(items) - set(HELP))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    model_keys = {f.name for f in fields(ModelConfig)}
    try:
        model = ModelConfig.from_items({k: v for k, v in items.items() if k in model_keys})
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    plan_kwargs, blob_kwargs = {}, {}
    plan_ref, blob_ref = TrainPlan(), BlobSpec()
    for f in fields(TrainPlan):
        key = _plan_key(f.name)
        if key in items:
            plan_kwargs[f.name] = _coerce(key, items[key], getattr(plan_ref, f.name))
    for f in fields(BlobSpec):
        key = f"data_{f.name}"
        if key in items:
            blob_kwargs[f.name] = _coerce(key, items[key], getattr(blob_ref, f.name))
    try:
        plan = replace(plan_ref, **plan_kwargs)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    precision = items.get("precision", "float64").strip()
    if precision not in PRECISIONS:
        raise ConfigError(f"precision: expected one of {PRECISIONS}, got {precision!r}")
    return RunConfig(model, plan, replace(blob_ref, **blob_kwargs), precision)


def parse_text(text: str) -> RunConfig:
    items = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        items[key.strip()] = value
    return parse_items(items)


def load(path) -> RunConfig:
    return parse_text(Path(path).read_text(encoding="utf-8"))
