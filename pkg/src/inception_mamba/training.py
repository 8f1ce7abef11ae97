"""Losses, optimiser, augmentation, cross-validation and ensemble inference."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc
from .data import SegSample
from .metrics import EvalReport, dice_score, iou_score
from .model import Checkpoint, ModelConfig, init_params, model_forward
from .params import ParamStore
from .tensor_core import Tape, Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_dice", "val_iou", "wall_ms")


# --- losses ---------------------------------------------------------------------------

def _check_target(target: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    t = np.asarray(target)
    if t.shape != (n, h, w):
        raise ValueError(f"target shape {t.shape} != {(n, h, w)}")
    if t.min(initial=0) < 0 or t.max(initial=0) >= c:
        raise ValueError(f"target classes must lie in [0, {c})")
    return t.astype(np.intp)


def _one_hot(t: np.ndarray, c: int, dtype) -> np.ndarray:
    return (t[:, None, :, :] == np.arange(c)[None, :, None, None]).astype(dtype)


def dice_loss(probs: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """``1 - mean_k (2 sum p_k t_k + s) / (sum p_k + sum t_k + s)`` over the whole batch."""
    t = _check_target(target, probs.shape)
    c = probs.shape[1]
    oh = _one_hot(t, c, probs.data.dtype)
    p = probs.data
    inter = (p * oh).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + oh.sum(axis=(0, 2, 3)) + smooth
    terms = (2 * inter + smooth) / denom
    loss = np.asarray(1.0 - terms.mean())

    def vjp(g):
        d = (2 * oh * denom[None, :, None, None] - (2 * inter + smooth)[None, :, None, None]) / (denom ** 2)[None, :, None, None]
        return (-g * d / c,)

    return tc.apply("dice_loss", loss, (probs,), vjp, p.size)


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-softmax probability of the target class."""
    t = _check_target(target, logits.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    oh = _one_hot(t, logits.shape[1], logits.data.dtype)
    pixels = t.size
    loss = np.asarray(-(logp * oh).sum() / pixels)

    def vjp(g):
        return (g * (np.exp(logp) - oh) / pixels,)

    return tc.apply("ce_loss", loss, (logits,), vjp, logits.data.size)


def combined_loss(logits: Tensor, target: np.ndarray, w_ce: float = 1.0, w_dice: float = 1.0,
                  smooth: float = 1.0) -> Tensor:
    ce = ce_loss(logits, target)
    dl = dice_loss(tc.softmax_channels(logits), target, smooth)
    return tc.add(tc.scale(ce, w_ce), tc.scale(dl, w_dice))


# --- optimiser ------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_records(self) -> dict[str, np.ndarray]:
        recs = {"step": np.array(self.step, dtype=np.int64),
                "hyper": np.array([self.lr, self.beta1, self.beta2, self.eps])}
        recs.update({f"m/{k}": v for k, v in self.m.items()})
        recs.update({f"v/{k}": v for k, v in self.v.items()})
        return recs

    @classmethod
    def from_records(cls, recs: dict[str, np.ndarray]) -> "AdamState":
        lr, b1, b2, eps = (float(x) for x in recs["hyper"])
        m = {k[2:]: v for k, v in recs.items() if k.startswith("m/")}
        v = {k[2:]: v for k, v in recs.items() if k.startswith("v/")}
        return cls(lr, b1, b2, eps, int(recs["step"]), m, v)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates ``state`` and returns new parameter arrays."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# --- augmentation ---------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentFlags:
    rotate: bool = True
    flip: bool = True


def apply_transform(sample: SegSample, quarter_turns: int, flip_h: bool, flip_v: bool) -> SegSample:
    img, mask = sample.image, sample.mask
    if quarter_turns % 4:
        img, mask = np.rot90(img, quarter_turns, axes=(1, 2)), np.rot90(mask, quarter_turns, axes=(0, 1))
    if flip_h:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    if flip_v:
        img, mask = img[:, ::-1, :], mask[::-1, :]
    return SegSample(np.ascontiguousarray(img), np.ascontiguousarray(mask), sample.id)


def draw_transform(rng: np.random.Generator, flags: AugmentFlags) -> tuple[int, bool, bool]:
    # always consume the same draws so the stream does not depend on flags
    turns, fh, fv = int(rng.integers(4)), rng.random() < 0.5, rng.random() < 0.5
    return (turns if flags.rotate else 0, bool(fh and flags.flip), bool(fv and flags.flip))


def augment(sample: SegSample, rng: np.random.Generator, flags: AugmentFlags = AugmentFlags()) -> SegSample:
    """Right-angle rotation and random flips, applied identically to image and mask."""
    return apply_transform(sample, *draw_transform(rng, flags))


# --- cross-validation and ensembles ---------------------------------------------------

def kfold_split(n_items: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded partition into k validation folds; the first ``n % k`` folds get one extra item."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n_items < k:
        raise ValueError(f"cannot split {n_items} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n_items)
    folds = np.array_split(perm, k)
    all_idx = np.arange(n_items)
    return [(np.setdiff1d(all_idx, f), np.sort(f)) for f in folds]


Model = tuple[ModelConfig, ParamStore]


def predict_probs(model: Model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    cfg, store = model
    store.training = False
    out = []
    for start in range(0, len(images), batch_size):
        logits = model_forward(Tensor(images[start:start + batch_size]), cfg, store)
        out.append(tc.softmax_channels(logits).data)
    return np.concatenate(out, axis=0)


def ensemble_probs(models: Sequence[Model], images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    if not models:
        raise ValueError("ensemble needs at least one model")
    classes = {cfg.num_classes for cfg, _ in models}
    if len(classes) != 1:
        raise ValueError(f"ensemble members disagree on class count: {sorted(classes)}")
    total = None
    for m in models:
        p = predict_probs(m, images, batch_size)
        total = p if total is None else total + p
    return total / len(models)


def ensemble_predict(models: Sequence[Model], images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax of the mean per-model softmax probabilities -> (n, h, w) class mask."""
    return ensemble_probs(models, images, batch_size).argmax(axis=1)


def evaluate(models: Sequence[Model], samples: Sequence[SegSample], batch_size: int = 16) -> EvalReport:
    report = EvalReport()
    images = np.stack([s.image for s in samples])
    preds = ensemble_predict(models, images, batch_size)
    for s, p in zip(samples, preds):
        report.add(s.id, p, s.mask)
    return report


# --- training -------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainPlan:
    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-3
    w_ce: float = 1.0
    w_dice: float = 1.0
    dice_smooth: float = 1.0
    augment_rotate: bool = True
    augment_flip: bool = True
    folds: int = 5
    repeats: int = 3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @property
    def flags(self) -> AugmentFlags:
        return AugmentFlags(self.augment_rotate, self.augment_flip)


# dataset presets; the synthetic task uses the TrainPlan defaults
PAPER_PLAN = TrainPlan(batch_size=16, epochs=100, lr=1e-4)
GLAS_PLAN = TrainPlan(batch_size=4, epochs=100, lr=1e-3)


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: list[dict]

    @property
    def model(self) -> Model:
        return self.checkpoint.config, self.checkpoint.to_store()


def _val_scores(model: Model, val: Sequence[SegSample], batch_size: int) -> tuple[float, float]:
    if not val:
        return float("nan"), float("nan")
    preds = ensemble_predict([model], np.stack([s.image for s in val]), batch_size)
    dice = [dice_score(p == 1, s.mask == 1) for p, s in zip(preds, val)]
    iou = [iou_score(p == 1, s.mask == 1) for p, s in zip(preds, val)]
    return float(np.mean(dice)), float(np.mean(iou))


def train_step(cfg: ModelConfig, store: ParamStore, state: AdamState, images: np.ndarray, masks: np.ndarray,
               plan: TrainPlan) -> float:
    store.training = True
    with Tape() as tape:
        logits = model_forward(Tensor(images), cfg, store)
        loss = combined_loss(logits, masks, plan.w_ce, plan.w_dice, plan.dice_smooth)
    value = loss.item()
    if not np.isfinite(value):
        raise tc.NonFiniteError(f"loss became non-finite at step {state.step + 1}")
    grads = tc.backward(tape, loss, store.tensors.values())
    store.assign(adam_step(store.arrays(), grads, state))
    return value


def fit(plan: TrainPlan, train: Sequence[SegSample], cfg: ModelConfig, val: Sequence[SegSample] = (),
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Minibatch Adam on the combined loss; deterministic given ``plan.seed`` and ``cfg.seed``."""
    if not train:
        raise ValueError("training set is empty")
    store = init_params(cfg)
    state = AdamState(plan.lr)
    rows = []
    n = len(train)
    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([plan.seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            batch = [augment(train[i], np.random.default_rng([plan.seed, epoch, int(i)]), plan.flags) for i in idx]
            images = np.stack([b.image for b in batch])
            masks = np.stack([b.mask for b in batch])
            total += train_step(cfg, store, state, images, masks, plan) * len(idx)
        val_dice, val_iou = _val_scores((cfg, store), val, max(plan.batch_size, 16))
        row = {"epoch": epoch, "train_loss": total / n, "val_dice": val_dice, "val_iou": val_iou,
               "wall_ms": (time.perf_counter() - t0) * 1000.0}
        rows.append(row)
        log.info("epoch %d loss %.5f val_dice %.4f", epoch, row["train_loss"], val_dice)
        if on_epoch:
            on_epoch(row)
    rng_state = json.dumps({"plan_seed": plan.seed, "model_seed": cfg.seed, "epochs": plan.epochs})
    ckpt = Checkpoint.from_store(cfg, store, state.to_records(), rng_state)
    store.training = False
    return FitResult(ckpt, rows)


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/val index split; ``fraction == 0`` validates on the training set."""
    if fraction <= 0:
        idx = np.arange(n)
        return idx, idx
    n_val = min(max(1, int(round(fraction * n))), n - 1)
    perm = np.random.default_rng([seed, 7]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class FoldResult:
    repeat: int
    fold: int
    val_idx: np.ndarray
    result: FitResult


def _fit_fold(args) -> FitResult:
    plan, train, val, cfg = args
    return fit(plan, train, cfg, val)


def cross_validate(plan: TrainPlan, dataset: Sequence[SegSample], cfg: ModelConfig, folds: int | None = None,
                   repeats: int | None = None, jobs: int = 1) -> list[FoldResult]:
    """``repeats`` x ``folds`` cross-validation; each repeat reshuffles the folds."""
    folds = folds or plan.folds
    repeats = repeats or plan.repeats
    jobs_args, meta = [], []
    for r in range(repeats):
        for f, (tr, va) in enumerate(kfold_split(len(dataset), folds, plan.seed + r)):
            fold_plan = replace(plan, seed=plan.seed + 1000 * r + f)
            fold_cfg = replace(cfg, seed=cfg.seed + 1000 * r + f)
            jobs_args.append((fold_plan, [dataset[i] for i in tr], [dataset[i] for i in va], fold_cfg))
            meta.append((r, f, va))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_fold, jobs_args))
    else:
        results = [_fit_fold(a) for a in jobs_args]
    return [FoldResult(r, f, va, res) for (r, f, va), res in zip(meta, results)]


def imm_position_sweep(plan: TrainPlan, train: Sequence[SegSample], val: Sequence[SegSample],
                       cfg: ModelConfig) -> list[dict]:
    """Train one model per decoder IMM position and rank them by final validation Dice."""
    rows = []
    for position in ("first", "second", "third"):
        res = fit(plan, train, replace(cfg, imm_decoder_position=position, use_decoder_imm=True), val)
        last = res.log[-1] if res.log else {"val_dice": float("nan"), "val_iou": float("nan"), "train_loss": float("nan")}
        rows.append({"position": position, "val_dice": last["val_dice"], "val_iou": last["val_iou"],
                     "train_loss": last["train_loss"]})
    ranked = sorted(range(len(rows)), key=lambda i: (-rows[i]["val_dice"], i))
    for rank, i in enumerate(ranked, start=1):
        rows[i]["rank"] = rank
    return rows


def write_log(path, rows: Sequence[dict], fieldnames: Sequence[str] = LOG_FIELDS) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
