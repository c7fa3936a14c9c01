"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .data import DatasetError, load_dataset, synth_generate, write_dataset
from .gradcheck import run_all, summarize
from .losses import LOSS_KINDS
from .model import TOGGLES, build, count_params, estimate_flops
from .train import (TOGGLE_LABELS, NonFiniteLossError, TrainConfig, ablate, evaluate,
                    format_log, load_model, predict_dir, train)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# accepted --toggle names: table labels and model field names
TOGGLE_NAMES = {**{label.lower(): f for label, f in zip(TOGGLE_LABELS, TOGGLES)},
                **{f: f for f in TOGGLES}}
_TRUE = {"1", "true", "yes", "on", "y"}
_FALSE = {"0", "false", "no", "off", "n"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_toggle(text: str) -> tuple[str, bool]:
    name, sep, value = text.partition("=")
    key = name.strip().lower()
    if not sep or key not in TOGGLE_NAMES:
        raise argparse.ArgumentTypeError(
            f"expected <name>=<bool> with name in {sorted(TOGGLE_NAMES)}, got {text!r}")
    v = value.strip().lower()
    if v not in _TRUE | _FALSE:
        raise argparse.ArgumentTypeError(f"not a boolean: {value!r}")
    return TOGGLE_NAMES[key], v in _TRUE


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="TrainConfig JSON file")
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--loss", choices=LOSS_KINDS)
    g.add_argument("--edge-weight", type=float, help="EAL weight w")
    g.add_argument("--toggle", type=parse_toggle, action="append", default=[], metavar="NAME=BOOL",
                   help="architecture switch: in_A, AM, CAM or EEL")


def _data_flags(p: argparse.ArgumentParser, split_names: tuple[str, str]) -> None:
    a, b = split_names
    p.add_argument(f"--{a}-dir", type=Path, help=f"{a} dataset root with images/ and masks/")
    p.add_argument(f"--{b}-dir", type=Path, help=f"{b} dataset root with images/ and masks/")
    p.add_argument("--synth-train", type=int, default=64, help="synthetic train count when no dirs are given")
    p.add_argument("--synth-test", type=int, default=16, help="synthetic test count when no dirs are given")
    p.add_argument("--synth-seed", type=int, default=0)


def load_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config.read_text()) if args.config else TrainConfig()
    for flag, name in (("lr", "lr"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            cfg = dataclasses.replace(cfg, **{name: value})
    if args.loss is not None:
        cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, kind=args.loss))
    if args.edge_weight is not None:
        cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, edge_weight=args.edge_weight))
    if args.toggle:
        cfg = dataclasses.replace(cfg, model=cfg.model.with_toggles(**dict(args.toggle)))
    cfg.validate()
    return cfg


def _datasets(args: argparse.Namespace, cfg: TrainConfig, a: str, b: str):
    dir_a, dir_b = getattr(args, f"{a}_dir"), getattr(args, f"{b}_dir")
    size = cfg.model.input_size[0]
    first = load_dataset(dir_a) if dir_a else synth_generate(args.synth_train, size, args.synth_seed, "train")
    second = load_dataset(dir_b) if dir_b else synth_generate(args.synth_test, size, args.synth_seed, "test")
    return first, second


def cmd_train(args) -> int:
    cfg = load_config(args)
    train_set, val_set = _datasets(args, cfg, "train", "val")
    state = train(cfg, train_set, val_set, out_dir=args.out, resume=args.resume)
    print(format_log(state.history))
    print(f"best IoU {state.best_iou:.4f} at epoch {state.best_epoch}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    report = evaluate(model, load_dataset(args.data))
    print(report.to_text(per_sample=not args.summary))
    if args.json:
        args.json.write_text(report.to_json())
    return EXIT_OK


def cmd_predict(args) -> int:
    written = predict_dir(args.checkpoint, args.images, args.out, args.threshold)
    print(f"wrote {len(written)} masks to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    n = write_dataset(synth_generate(args.count, args.size, args.seed, args.split), args.out)
    print(f"wrote {n} image/mask pairs to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    train_set, test_set = _datasets(args, cfg, "train", "test")
    report = ablate(cfg, train_set, test_set, train_rows=not args.structure_only,
                    on_row=lambda r: logging.info("row %s %s IoU %.4f", r.label, r.loss, r.iou))
    print(report.to_text())
    if args.json:
        args.json.write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_config(args)
    model = build(cfg.model, cfg.seed)
    print(count_params(model))
    if args.macs:
        print(f"{estimate_flops(model) / 1e9:.4f} GMACs")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed)
    print(summarize(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def version_text() -> str:
    return (f"artifact {__version__} (python {platform.python_version()}, "
            f"numpy {np.__version__})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nestseg", description="Nested UNet segmentation on a numpy autodiff engine.")
    parser.add_argument("--version", action="version", version=version_text())
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _config_flags(p)
    _data_flags(p, ("train", "val"))
    p.add_argument("--out", type=Path, required=True, help="directory for checkpoints and logs")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset root with images/ and masks/")
    p.add_argument("--json", type=Path, help="also write the report as JSON")
    p.add_argument("--summary", action="store_true", help="print only the mean row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write binary masks for a directory of images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic dataset as PNGs")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="run the design and loss ablation tables")
    _config_flags(p)
    _data_flags(p, ("train", "test"))
    p.add_argument("--structure-only", action="store_true", help="skip training; params and GMACs only")
    p.add_argument("--json", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="print the trainable parameter count")
    _config_flags(p)
    p.add_argument("--macs", action="store_true", help="also print forward GMACs")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all ops, blocks and losses")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, DatasetError, CheckpointError, NonFiniteLossError) as exc:
        print(f"nestseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
