"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every subcommand also takes ``--config FILE`` with ``key=value`` lines (``#``
comments allowed); keys are flag names without the leading dashes.  Flags on
the command line override the file.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _size(text: str) -> tuple:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


def read_config(path) -> Dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}")
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


# ------------------------------------------------------------------ commands


def cmd_correct(args) -> int:
    from .data import ImageFormatError, load_ppm, save_ppm
    from .retinex import CorrectionParams, chromatic_scale, intensity, msr, simplest_color_balance

    try:
        params = CorrectionParams(sigmas=args.sigmas, s1=args.s1, s2=args.s2, log_offset=args.log_offset)
    except ValueError as exc:
        raise UsageError(str(exc))
    try:
        image = load_ppm(args.input).astype(np.float64)
    except FileNotFoundError:
        raise DataError(f"input not found: {args.input}")
    except ImageFormatError as exc:
        raise DataError(f"{args.input}: {exc}")

    timings = []
    t0 = time.perf_counter()
    int_map = intensity(image)
    timings.append(("intensity", time.perf_counter() - t0))
    t0 = time.perf_counter()
    ms = msr(int_map, params)
    timings.append(("multi-scale retinex", time.perf_counter() - t0))
    t0 = time.perf_counter()
    int1 = simplest_color_balance(ms, params.s1, params.s2)
    timings.append(("color balance", time.perf_counter() - t0))
    t0 = time.perf_counter()
    out = chromatic_scale(image, int_map, int1)
    timings.append(("chromatic scale", time.perf_counter() - t0))
    save_ppm(out, args.output)
    for stage, secs in timings:
        print(f"{stage:<20} {secs * 1000:9.2f} ms")
    if args.figure:
        from .plots import correction_panel

        correction_panel(image, out, args.figure)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import synth_generate, synth_metadata, write_synthetic

    try:
        scenes = synth_generate(args.count, args.seed, args.size, args.illum)
    except ValueError as exc:
        raise UsageError(str(exc))
    write_synthetic(args.out, scenes, synth_metadata(args.count, args.seed, args.size, args.illum))
    print(f"wrote {len(scenes)} samples to {args.out}")
    return EXIT_OK


def _load_samples(path):
    from .data import DatasetError, ImageFormatError, load_dataset

    if not Path(path).is_dir():
        raise DataError(f"dataset directory not found: {path}")
    try:
        samples = load_dataset(path)
    except (DatasetError, ImageFormatError) as exc:
        raise DataError(str(exc))
    if not samples:
        raise DataError(f"no samples in {path}")
    return samples


def cmd_train(args) -> int:
    from .checkpoint import Checkpoint
    from .data import split
    from .net import DUNetConfig, build
    from .plots import training_curves
    from .retinex import CorrectionParams
    from .train import TrainConfig, TrainingError, format_log, train

    if args.data is None or args.out is None:
        raise UsageError("--data and --out are required")
    samples = _load_samples(args.data)
    size = samples[0].image.shape[1:]
    try:
        config = DUNetConfig(variant=args.variant, base_channels=args.base_channels, depth=args.depth,
                             input_size=size, illum=CorrectionParams(sigmas=args.sigmas, s1=args.s1, s2=args.s2))
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                          eval_every=args.eval_every, max_steps=args.max_steps, rms_decay=args.rms_decay,
                          rms_eps=args.rms_eps)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.val_fraction > 0:
        train_set, val_set, _ = split(samples, (1 - args.val_fraction, args.val_fraction, 0.0), args.seed)
        train_set = sorted(train_set, key=lambda s: s.id)
    else:
        train_set, val_set = samples, samples
    if cfg.batch_size > len(train_set):
        raise DataError(f"batch size {cfg.batch_size} exceeds the {len(train_set)} training samples")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build(config, args.seed)
    Checkpoint.from_model(model).save(out / "init.ckpt")
    print(f"variant={config.variant} parameters={model.parameter_count()}")

    def report(rec):
        val = "-" if rec.val_miou is None else f"{rec.val_miou:.4f}"
        print(f"epoch {rec.epoch:4d}  step {rec.step:6d}  loss {rec.mean_loss:.5f}  val mIoU {val}", flush=True)

    try:
        result = train(model, train_set, val_set, cfg, on_epoch=report)
    except (TrainingError, FloatingPointError) as exc:
        raise NumericError(str(exc))
    except ValueError as exc:
        raise DataError(str(exc))
    result.final.save(out / "final.ckpt")
    result.best.save(out / "best.ckpt")
    (out / "train_log.csv").write_text(format_log(result, config.variant))
    training_curves(result.history, out / "training.png", title=config.variant)
    print(f"max val mIoU {result.max_val_miou}")
    return EXIT_OK


def _load_report(path):
    from .train import EvalReport

    try:
        return EvalReport.from_text(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}")
    except ValueError as exc:
        raise DataError(f"malformed report {path}: {exc}")


def cmd_eval(args) -> int:
    from .checkpoint import Checkpoint, CheckpointError
    from .plots import iou_histogram
    from .train import evaluate

    if args.model is None or args.data is None or args.report is None:
        raise UsageError("--model, --data and --report are required")
    try:
        ckpt = Checkpoint.load(args.model)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.model}")
    except (CheckpointError, ValueError) as exc:
        raise DataError(f"{args.model}: {exc}")
    samples = _load_samples(args.data)
    model = ckpt.to_model()
    try:
        report = evaluate(model, samples, args.threshold, model_id=Path(args.model).name, max_iou=ckpt.max_val_miou)
    except ValueError as exc:
        raise DataError(str(exc))
    Path(args.report).write_text(report.to_text())
    iou_histogram(report, Path(args.report).with_suffix(".png"))
    print(f"mIoU {report.miou:.6f}  maxIoU {report.max_iou:.6f}  images {len(report.records)}")
    return EXIT_OK


def cmd_exceed(args) -> int:
    from .train import exceed_rate

    if args.report is None or args.baseline is None:
        raise UsageError("--report and --baseline are required")
    try:
        value = exceed_rate(_load_report(args.report), _load_report(args.baseline))
    except ValueError as exc:
        raise DataError(str(exc))
    print(repr(value))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run_all(args.seeds)
    print(gradcheck.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="illumseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value file mirroring these flags")
        p.set_defaults(func=func)
        return p

    p = command("correct", cmd_correct, "static illumination correction of one PPM image")
    p.add_argument("--input", help="P6 input image (required)")
    p.add_argument("--output", help="P6 output image (required)")
    p.add_argument("--sigmas", type=_floats, default="12,80,250", help="three Gaussian scales")
    p.add_argument("--s1", type=float, default=0.01, help="low clip fraction")
    p.add_argument("--s2", type=float, default=0.01, help="high clip fraction")
    p.add_argument("--log-offset", type=float, default=1.0)
    p.add_argument("--figure", default=None, help="optional PNG with original and corrected side by side")

    p = command("synth", cmd_synth, "generate a synthetic illumination x reflectance dataset")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default="96x128", help="HxW")
    p.add_argument("--illum", type=_floats, default="0.5,1.5", help="illumination range lo,hi")
    p.add_argument("--out", help="output directory (required)")

    p = command("train", cmd_train, "train a segmentation model")
    p.add_argument("--variant", choices=("unet", "dicu", "dvsfn", "dunet"), default="dunet")
    p.add_argument("--data", help="dataset directory (required)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigmas", type=_floats, default="3,10,30")
    p.add_argument("--s1", type=float, default=0.01)
    p.add_argument("--s2", type=float, default=0.01)
    p.add_argument("--rms-decay", type=float, default=0.99)
    p.add_argument("--rms-eps", type=float, default=1e-8)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None, help="optional cap on optimizer steps")
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="hold out this fraction for validation; 0 validates on the training set")
    p.add_argument("--out", help="output directory for checkpoints, log and figure (required)")

    p = command("eval", cmd_eval, "per-image IoU report for a checkpoint")
    p.add_argument("--model", help="checkpoint file (required)")
    p.add_argument("--data", help="dataset directory (required)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--report", help="output report path, required (a .png histogram is written alongside)")

    p = command("exceed", cmd_exceed, "fraction of images where --report beats --baseline")
    p.add_argument("--report", help="report to score (required)")
    p.add_argument("--baseline", help="baseline report (required)")

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=20)
    return parser


REQUIRED = {"correct": ("input", "output"), "synth": ("out",), "train": ("data", "out"),
            "eval": ("model", "data", "report"), "exceed": ("report", "baseline")}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        if args.config:
            values = read_config(args.config)
            sub = parser._subparsers._group_actions[0].choices[args.command]
            known = {a.dest for a in sub._actions}
            unknown = set(values) - known
            if unknown:
                raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
            sub.set_defaults(**values)
            args = parser.parse_args(argv)
        for name in REQUIRED.get(args.command, ()):
            if getattr(args, name) is None:
                raise UsageError(f"--{name.replace('_', '-')} is required")
        return args.func(args)
    except UsageError as exc:
        print(f"illumseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"illumseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"illumseg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
