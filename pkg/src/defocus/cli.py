"""Command-line entry point: ``defocus <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import selftest
from .bandpass import analytic_response, default_omegas, numerical_response
from .diagnostics import (
    attention_map_approx, gradient_map, read_pnm, receptive_field, transfer_resolution, write_csv_map, write_pgm,
)
from .errors import DefocusError
from .network import load_checkpoint, save_checkpoint
from .training import load_run_config, train

log = logging.getLogger("defocus")


def _cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config)
    train_cfg.dataset_path = str(args.data)
    result = train(model_cfg, train_cfg, metrics_path=args.metrics, checkpoint_path=args.out)
    losses = result.metrics.losses()
    if losses.size:
        log.info("trained %d steps, final loss %.6g", losses.size, losses[-1])
    return 0


def _cmd_analyze_filter(args) -> int:
    omegas = default_omegas(args.samples)
    ana = analytic_response(args.lam, args.theta, omegas)
    num = numerical_response(args.lam, args.theta, args.kernel_len, omegas)
    if num.metadata["truncated"]:
        print(f"warning: {num.metadata['warning']}", file=sys.stderr)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["omega", "analytic_mag", "numerical_mag"])
        for o, a, n in zip(omegas, ana.magnitudes, num.magnitudes):
            w.writerow([f"{o:.9g}", f"{a:.9g}", f"{n:.9g}"])
    return 0


def _cmd_visualize(args) -> int:
    model = load_checkpoint(args.ckpt)
    image = read_pnm(args.image)
    if args.kind == "receptive":
        m = receptive_field(model, image, args.layer)
    elif args.kind == "attention":
        m = attention_map_approx(model, image, args.layer)
    else:
        m = gradient_map(model, image, args.label, args.layer)
    fmt = args.format or ("csv" if str(args.out).lower().endswith(".csv") else "pgm")
    (write_csv_map if fmt == "csv" else write_pgm)(args.out, m.values)
    return 0


def _cmd_transfer(args) -> int:
    model = transfer_resolution(args.ckpt, args.ratio, args.decay_scale, args.pos_scale)
    save_checkpoint(model, args.out)
    return 0


def _cmd_selftest(args) -> int:
    return 0 if selftest.run(sys.stdout, seed=args.seed) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defocus", description="De-focus attention toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a DFA1 dataset")
    p.add_argument("--config", required=True, type=Path, help="JSON with 'model' and 'train' sections")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--metrics", type=Path, help="per-step CSV")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("analyze-filter", help="frequency response of one bandpass filter")
    p.add_argument("--lambda", dest="lam", required=True, type=float)
    p.add_argument("--theta", required=True, type=float)
    p.add_argument("--kernel-len", type=int, default=256)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_analyze_filter)

    p = sub.add_parser("visualize", help="receptive field, attention or gradient map")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path, help="PGM/PPM image")
    p.add_argument("--layer", required=True, type=int)
    p.add_argument("--kind", required=True, choices=("receptive", "attention", "gradient"))
    p.add_argument("--label", type=int, default=0, help="class label for gradient maps")
    p.add_argument("--format", choices=("pgm", "csv"))
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_visualize)

    p = sub.add_parser("transfer-resolution", help="rescale decay and positions for a new input size")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--ratio", required=True, type=float)
    p.add_argument("--decay-scale", choices=("r", "r2"), default="r")
    p.add_argument("--pos-scale", choices=("r", "r2"), default="r2")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DefocusError, OSError, ValueError, ArithmeticError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
