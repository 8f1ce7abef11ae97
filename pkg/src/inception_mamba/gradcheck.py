"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tape, Tensor

# entries smaller than this are compared absolutely; FD round-off at h=1e-5 is ~1e-11
REL_FLOOR = 1e-4


@dataclass
class GradReport:
    max_rel_error: float
    worst: str
    checked: int
    kinks: int = 0


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


# A ReLU or max-pool switch inside [x-h, x+h] spoils the central difference at
# that step only, and round-off on a large loss spoils it for tiny gradients;
# a wrong analytic gradient disagrees at every step.  Entries above
# REFINE_ABOVE are therefore re-measured at h/10, h/100 and 10h.
REFINE_ABOVE = 1e-7
REFINE_SCALES = (0.1, 0.01, 10.0)


def gradcheck(loss_fn: Callable[[dict[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
              n_coords: int = 10, h: float = 1e-5, seed: int = 0,
              only: tuple[str, ...] | None = None) -> GradReport:
    """Compare reverse-mode gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives leaf tensors named after ``inputs`` and must return a
    scalar.  ``n_coords`` random coordinates of every input (or of ``only``)
    are perturbed by ``±h``; poorly matching coordinates are re-measured at
    other steps and the best agreement is kept (``GradReport.kinks`` counts them).
    """
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    with Tape() as tape:
        leaves = {k: tc.parameter(v, k) for k, v in arrays.items()}
        loss = loss_fn(leaves)
    grads = tc.backward(tape, loss, leaves.values())

    def evaluate(name, flat_idx, delta):
        pert = dict(arrays)
        arr = arrays[name].copy()
        arr.flat[flat_idx] += delta
        pert[name] = arr
        return loss_fn({k: Tensor(v) for k, v in pert.items()}).item()

    def central(name, idx, step):
        return (evaluate(name, idx, step) - evaluate(name, idx, -step)) / (2 * step)

    worst, worst_name, checked, kinks = 0.0, "", 0, 0
    for name in (only or tuple(arrays)):
        size = arrays[name].size
        picks = rng.choice(size, size=min(n_coords, size), replace=False)
        for idx in picks:
            analytic = float(grads[name].flat[idx])
            err = relative_error(analytic, central(name, idx, h))
            if err > REFINE_ABOVE:
                kinks += 1
                for scale in REFINE_SCALES:
                    err = min(err, relative_error(analytic, central(name, idx, h * scale)))
                    if err <= REFINE_ABOVE:
                        break
            checked += 1
            if err > worst:
                pos = ",".join(str(int(i)) for i in np.unravel_index(idx, arrays[name].shape))
                worst, worst_name = err, f"{name}[{pos}]"
    return GradReport(worst, worst_name, checked, kinks)


# --- per-block suite ------------------------------------------------------------------

BLOCKS = ("conv", "norm", "fcm", "imm", "mamba", "bottleneck", "decoder", "head", "full_model",
          "dice_loss", "ce_loss")
FULL_MODEL_TOLERANCE = 1e-5
BLOCK_TOLERANCE = 1e-6


def tolerance(block: str) -> float:
    return FULL_MODEL_TOLERANCE if block == "full_model" else BLOCK_TOLERANCE


def _bind(leaves: Mapping[str, Tensor]):
    """Training-mode store over ``leaves`` (inputs are the names starting with ``input``)."""
    from .params import ParamStore

    norms = {k[: -len(".gamma")]: tc.NormStats.fresh(t.shape[0]) for k, t in leaves.items() if k.endswith(".gamma")}
    store = ParamStore({}, norms)
    store.tensors = {k: t for k, t in leaves.items() if not k.startswith("input")}
    store.training = True
    return store


def _probe(rng: np.random.Generator, out: Tensor) -> Tensor:
    # a fixed random linear functional keeps every output coordinate in play
    return tc.weighted_sum(out, rng.standard_normal(out.shape) / np.sqrt(np.prod(out.shape)))


def _case(block: str, cfg, rng: np.random.Generator):
    """(loss_fn, inputs, n_coords) for one block at toy shapes."""
    from . import blocks as bk
    from .model import init_params, model_forward
    from .params import prefixed
    from .ssm import SsmParams, init_ssm, mamba_block_forward
    from .training import ce_loss, combined_loss, dice_loss

    probe_seed = int(rng.integers(1 << 31))

    def probe(out):
        return _probe(np.random.default_rng(probe_seed), out)

    if block == "conv":
        inputs = {"input": rng.standard_normal((2, 4, 7, 7)),
                  "weight": rng.standard_normal((6, 2, 3, 3)), "bias": rng.standard_normal(6)}
        fn = lambda t: probe(tc.conv2d(t["input"], t["weight"], t["bias"], stride=2, padding=1,
                                       padding_mode="replicate", groups=2))
        return fn, inputs, 10
    if block == "norm":
        inputs = {"input": rng.standard_normal((3, 4, 5, 5)) * 2 + 1,
                  "n.gamma": rng.uniform(0.5, 1.5, 4), "n.beta": rng.standard_normal(4)}
        fn = lambda t: probe(tc.batchnorm2d(t["input"], t["n.gamma"], t["n.beta"], tc.NormStats.fresh(4), True))
        return fn, inputs, 10
    if block == "fcm":
        inputs = {"input": rng.standard_normal((2, 4, 8, 8)), **bk.init_fcm(4, rng)}
        fn = lambda t: probe(bk.fcm_forward(t["input"], _bind(t).scoped("")))
        return fn, inputs, 8
    if block == "imm":
        imm = cfg.imm_template(cfg.c_bottleneck)
        inputs = {"input": rng.standard_normal((2, cfg.c_bottleneck, 4, 4)), **bk.init_imm(imm, rng)}
        fn = lambda t: probe(bk.imm_forward(t["input"], imm, _bind(t).scoped("")))
        return fn, inputs, 4
    if block == "mamba":
        inputs = {"input": rng.standard_normal((2, 12, 4)), **init_ssm(4, cfg.ssm, rng)}
        fn = lambda t: probe(mamba_block_forward(t["input"], SsmParams.from_scope(_bind(t).scoped(""))))
        return fn, inputs, 6
    if block == "bottleneck":
        bn = cfg.bottleneck
        c1, c2, c3 = bn.stage_channels
        inputs = {"input1": rng.standard_normal((2, c1, 8, 8)), "input2": rng.standard_normal((2, c2, 4, 4)),
                  "input3": rng.standard_normal((2, c3, 2, 2)), **bk.init_bottleneck(bn, rng)}
        fn = lambda t: probe(bk.bottleneck_forward(t["input1"], t["input2"], t["input3"], bn, _bind(t).scoped("")))
        return fn, inputs, 3
    if block == "decoder":
        dec = cfg.decoder
        inputs = {"input": rng.standard_normal((2, dec.c_in, 2, 2)), **bk.init_decoder(dec, rng)}
        fn = lambda t: probe(bk.decoder_forward(t["input"], dec, _bind(t).scoped("")))
        return fn, inputs, 3
    if block == "head":
        inputs = {"input": rng.standard_normal((2, cfg.c_dec, 8, 8)), **bk.init_head(cfg.c_dec, cfg.num_classes, rng)}
        fn = lambda t: probe(bk.seg_head(t["input"], cfg.num_classes, _bind(t).scoped("")))
        return fn, inputs, 6
    if block == "full_model":
        store = init_params(cfg)
        images = rng.uniform(0, 1, (2, 3, cfg.input_h, cfg.input_w))
        target = rng.integers(0, cfg.num_classes, (2, cfg.input_h, cfg.input_w))
        inputs = {"input": images, **store.arrays()}
        fn = lambda t: combined_loss(model_forward(t["input"], cfg, _bind(t)), target)
        return fn, inputs, 2
    if block == "dice_loss":
        target = rng.integers(0, 3, (2, 5, 5))
        inputs = {"input": rng.standard_normal((2, 3, 5, 5))}
        fn = lambda t: dice_loss(tc.softmax_channels(t["input"]), target)
        return fn, inputs, 20
    if block == "ce_loss":
        target = rng.integers(0, 3, (2, 5, 5))
        inputs = {"input": rng.standard_normal((2, 3, 5, 5))}
        fn = lambda t: ce_loss(t["input"], target)
        return fn, inputs, 20
    raise ValueError(f"unknown block {block!r}; choose from {BLOCKS}")


def block_suite(cfg=None, blocks: tuple[str, ...] = BLOCKS, seed: int = 0,
                coords_scale: float = 1.0) -> dict[str, GradReport]:
    """Finite-difference check of every block at toy shapes; ``cfg`` defaults to the toy model."""
    from .model import toy_config

    unknown = [b for b in blocks if b not in BLOCKS]
    if unknown:
        raise ValueError(f"unknown block {unknown[0]!r}; choose from {BLOCKS}")
    cfg = cfg or toy_config()
    reports = {}
    for block in blocks:
        rng = np.random.default_rng([seed, BLOCKS.index(block)])
        fn, inputs, n_coords = _case(block, cfg, rng)
        reports[block] = gradcheck(fn, inputs, max(1, int(round(n_coords * coords_scale))), seed=seed)
    return reports
