"""Command-line entry point: data generation, training, evaluation, inference and checks.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import config as runcfg
from . import plotting
from . import tensor_core as tc
from .accounting import cost_report
from .data import (ManifestError, PnmError, gen_blob_dataset, load_manifest, read_image, resize_image, resize_mask,
                   write_dataset, write_mask)
from .gradcheck import block_suite
from .model import CheckpointError, init_params, load_checkpoint, save_checkpoint
from .training import (cross_validate, ensemble_predict, evaluate, fit, holdout_split,
                       imm_position_sweep, write_log)

PROG = "inception-mamba"
GRADCHECK_LIMIT = 1e-5
log = logging.getLogger(PROG)


class InputError(ValueError):
    """Bad user input; maps to exit code 2."""


INPUT_ERRORS = (InputError, runcfg.ConfigError, ManifestError, PnmError, CheckpointError, FileNotFoundError,
                IsADirectoryError)


def _load_config(path: str | None) -> runcfg.RunConfig:
    cfg = runcfg.load(path) if path else runcfg.RunConfig()
    tc.set_precision(cfg.precision)
    return cfg


def _load_samples(manifest: str, cfg) -> list:
    samples = load_manifest(manifest, (cfg.input_h, cfg.input_w))
    if not samples:
        raise InputError(f"{manifest}: manifest lists no samples")
    return samples


def _load_models(paths: list[str]):
    ckpts = [load_checkpoint(p) for p in paths]
    classes = {c.config.num_classes for c in ckpts}
    if len(classes) > 1:
        raise InputError(f"checkpoints disagree on class count: {sorted(classes)}")
    sizes = {(c.config.input_h, c.config.input_w) for c in ckpts}
    if len(sizes) > 1:
        raise InputError(f"checkpoints disagree on input size: {sorted(sizes)}")
    return [(c.config, c.to_store()) for c in ckpts]


# --- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = _load_config(args.spec).blobs
    try:
        spec.validate()
    except ValueError as exc:
        raise InputError(f"data_{exc}") from None
    if args.n < 1:
        raise InputError(f"--n must be >= 1, got {args.n}")
    samples = gen_blob_dataset(spec, args.n)
    manifest = write_dataset(args.out, samples)
    fg = np.array([s.mask.mean() for s in samples])
    blobs = np.array([ndimage.label(s.mask)[1] for s in samples])
    print(f"wrote {len(samples)} samples to {manifest}")
    print(f"image_size={spec.image_size} foreground_fraction mean={fg.mean():.4f} std={fg.std():.4f} "
          f"components mean={blobs.mean():.2f} min={blobs.min()} max={blobs.max()}")
    return 0


def _write_run(out: Path, stem: str, result) -> Path:
    ckpt_path = out / f"{stem}.ckpt"
    save_checkpoint(ckpt_path, result.checkpoint)
    write_log(out / f"{stem}_log.csv", result.log)
    return ckpt_path


def cmd_train(args) -> int:
    rc = _load_config(args.config)
    plan, model = rc.plan, rc.model
    if args.epochs is not None:
        plan = replace(plan, epochs=args.epochs)
    samples = _load_samples(args.data, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.sweep_imm_position:
        tr, va = holdout_split(len(samples), plan.val_fraction, plan.seed)
        rows = imm_position_sweep(plan, [samples[i] for i in tr], [samples[i] for i in va], model)
        write_log(out / "imm_position.csv", rows, ("position", "val_dice", "val_iou", "train_loss", "rank"))
        plotting.plot_position_sweep(out / "imm_position.png", rows)
        for r in rows:
            print(f"{r['position']:<7} val_dice={r['val_dice']:.4f} rank={r['rank']}")
        return 0

    if args.folds is None and args.repeats is None:
        tr, va = holdout_split(len(samples), plan.val_fraction, plan.seed)
        result = fit(plan, [samples[i] for i in tr], model, [samples[i] for i in va])
        path = _write_run(out, "model", result)
        plotting.plot_training_curves(out / "model_curves.png", [("model", result.log)])
        last = result.log[-1] if result.log else {}
        print(f"saved {path} final train_loss={last.get('train_loss', float('nan')):.6f} "
              f"val_dice={last.get('val_dice', float('nan')):.4f}")
        return 0

    folds = args.folds or plan.folds
    repeats = args.repeats or 1
    if not 2 <= folds <= len(samples):
        raise InputError(f"--folds must lie in [2, {len(samples)}], got {folds}")
    results = cross_validate(plan, samples, model, folds, repeats, args.jobs)
    summary, curves = [], []
    for fr in results:
        stem = f"r{fr.repeat}_f{fr.fold}"
        path = _write_run(out, stem, fr.result)
        curves.append((stem, fr.result.log))
        last = fr.result.log[-1] if fr.result.log else {}
        summary.append({"repeat": fr.repeat, "fold": fr.fold, "checkpoint": path.name,
                        "train_loss": last.get("train_loss", float("nan")),
                        "val_dice": last.get("val_dice", float("nan")),
                        "val_ids": " ".join(samples[i].id for i in fr.val_idx),
                        "val_indices": " ".join(str(int(i)) for i in fr.val_idx)})
    write_log(out / "cv_summary.csv", summary,
              ("repeat", "fold", "checkpoint", "train_loss", "val_dice", "val_indices", "val_ids"))
    plotting.plot_training_curves(out / "cv_curves.png", curves)
    dice = np.array([s["val_dice"] for s in summary])
    print(f"trained {len(results)} models ({repeats}x{folds}-fold) val_dice mean={dice.mean():.4f} "
          f"std={dice.std():.4f}")
    return 0


def cmd_eval(args) -> int:
    models = _load_models(args.ckpts)
    samples = _load_samples(args.data, models[0][0])
    report = evaluate(models, samples)
    path = Path(args.report)
    report.write_csv(path)
    plotting.plot_dice_histogram(path.with_name(path.stem + "_dice.png"), [s.dice for s in report.samples])
    print(f"{report.count} samples, {len(models)} model(s): dice={report.mean('dice'):.4f}±{report.std('dice'):.4f} "
          f"iou={report.mean('iou'):.4f} hd95={report.mean('hd95'):.3f} "
          f"(undefined for {report.hd95_undefined})")
    return 0


def cmd_infer(args) -> int:
    models = _load_models(args.ckpts)
    cfg = models[0][0]
    image = read_image(args.image)
    h, w = image.shape[1:]
    pred = ensemble_predict(models, resize_image(image, cfg.input_h, cfg.input_w)[None])[0]
    mask = resize_mask(pred.astype(np.uint8), h, w)
    write_mask(args.out, mask)
    print(f"wrote {args.out}: {h}x{w}, foreground fraction {float((mask > 0).mean()):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    model = _load_config(args.config).model
    reports = block_suite(model, seed=args.seed)
    worst = 0.0
    for name, rep in reports.items():
        worst = max(worst, rep.max_rel_error)
        flag = "ok" if rep.max_rel_error < GRADCHECK_LIMIT else "FAIL"
        print(f"{name:<11} max_rel_error={rep.max_rel_error:.3e} coords={rep.checked:<4} {flag}  worst={rep.worst}")
    if worst >= GRADCHECK_LIMIT:
        print(f"{PROG}: error: gradient check exceeded {GRADCHECK_LIMIT:g}", file=sys.stderr)
        return 1
    return 0


def cmd_count(args) -> int:
    model = _load_config(args.config).model
    size = (args.input, args.input) if args.input else None
    if size and size[0] % 16:
        raise InputError(f"--input must be a multiple of 16, got {args.input}")
    report = cost_report(model, size)
    registry = init_params(model).count()
    print(report.table())
    print(f"registry params {registry}")
    if args.csv:
        report.write_csv(args.csv)
    return 0


def cmd_config(args) -> int:
    if args.check:
        print(_load_config(args.check).dump(with_help=False), end="")
    else:
        print(runcfg.RunConfig().dump(), end="")
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic blob corpus", formatter_class=fmt)
    p.add_argument("--spec", default=None, help="key=value file; the data_* keys are used")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model, a CV ensemble or an IMM-position sweep",
                       formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value run config (defaults when omitted)")
    p.add_argument("--data", required=True, help="manifest.tsv")
    p.add_argument("--out", required=True, help="output directory for checkpoints, CSV logs and figures")
    p.add_argument("--folds", type=int, default=None, help="k-fold cross-validation (config folds when only --repeats is given)")
    p.add_argument("--repeats", type=int, default=None, help="cross-validation repeats (1 when only --folds is given)")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p.add_argument("--epochs", type=int, default=None, help="override the config's epochs")
    p.add_argument("--sweep-imm-position", action="store_true",
                   help="train once per decoder IMM position and write a ranked comparison")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints (ensemble mean) on a manifest", formatter_class=fmt)
    p.add_argument("--ckpts", nargs="+", required=True, help="one or more checkpoints")
    p.add_argument("--data", required=True, help="manifest.tsv")
    p.add_argument("--report", required=True, help="output CSV (a Dice histogram PNG is written beside it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a mask for one image", formatter_class=fmt)
    p.add_argument("--ckpts", nargs="+", required=True, help="one or more checkpoints")
    p.add_argument("--image", required=True, help="binary P6 image")
    p.add_argument("--out", required=True, help="output P5 mask")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value run config (defaults when omitted)")
    p.add_argument("--seed", type=int, default=0, help="seed for inputs and probed coordinates")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count", help="per-layer parameters and MACs", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value run config (defaults when omitted)")
    p.add_argument("--input", type=int, default=None, help="square input side (config size when omitted)")
    p.add_argument("--csv", default=None, help="also write the report as CSV")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("config", help="print or check run configs", formatter_class=fmt)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--dump-defaults", action="store_true", help="print every key with its default and meaning")
    g.add_argument("--check", default=None, help="validate a config file and print the resolved values")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # single-line diagnostic, no traceback
        print(f"{PROG}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
