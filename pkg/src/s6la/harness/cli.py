"""Command-line entry point: ``s6la {train,eval,verify,bench,inspect-checkpoint}``.

Config precedence, lowest to highest: built-in defaults, the ``--config``
file, ``--set KEY=VALUE`` overrides in order, then ``--seed`` and ``--dtype``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_overrides
from .training import METRICS_COLUMNS, NonFiniteLossError


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", type=int, choices=(32, 64))


def _load_config(args) -> RunConfig:
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.dtype is not None:
        overrides["dtype"] = str(args.dtype)
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig().update(overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s6la", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics, checkpoint and curves")
    _config_args(p)
    p.add_argument("--out", default="runs", metavar="DIR")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    _config_args(p)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", metavar="DIR", help="also write eval.csv here")

    p = sub.add_parser("verify", help="run oracle and invariant suites")
    p.add_argument("suite", nargs="?", default="all", choices=("grad", "scan", "jordan", "attention", "all"))

    p = sub.add_parser("bench", help="time forward passes across resolutions")
    p.add_argument("--resolutions", default="16,32,64")
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench", metavar="DIR")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's config echo and manifest")
    p.add_argument("checkpoint")
    return parser


def _cmd_train(args) -> int:
    from .training import train
    cfg = _load_config(args)
    try:
        result = train(cfg, args.out, figures=not args.no_figures)
    except NonFiniteLossError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    for split in ("train", "test"):
        row = result.final(split)
        print(f"{split}: epoch={row.epoch} loss={row.loss:.6f} top1={row.top1:.4f}")
    print(f"run directory: {result.run_dir}")
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .training import evaluate
    cfg = None
    if args.config or args.overrides or args.seed is not None or args.dtype is not None:
        base = RunConfig.from_text(load_checkpoint(args.checkpoint).config_text)
        if args.config:
            base = RunConfig.load(args.config)
        cfg = base.update(parse_overrides(args.overrides))
        if args.seed is not None:
            cfg.set("seed", str(args.seed))
        if args.dtype is not None:
            cfg.set("dtype", str(args.dtype))
    try:
        row = evaluate(args.checkpoint, cfg, args.split)
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    w.writerow(row.as_strings())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_COLUMNS)
            w.writerow(row.as_strings())
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_suite
    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def _cmd_bench(args) -> int:
    from .bench import fit_slope, growth_ratios, run_bench, write_bench
    resolutions = [int(r) for r in args.resolutions.split(",") if r.strip()]
    rows = run_bench(resolutions, repeats=args.repeats, batch=args.batch, seed=args.seed)
    path = write_bench(rows, args.out, figures=not args.no_figures and len(rows) > 1)
    for r in rows:
        print(f"{r['resolution']:>4}x{r['resolution']:<4} median {r['median_seconds'] * 1e3:9.2f} ms"
              f"  std {r['std_seconds'] * 1e3:7.2f} ms")
    if len(rows) > 1:
        print("ratios: " + ", ".join(f"{x:.2f}" for x in growth_ratios(rows)))
        print(f"slope: {fit_slope(rows):.3e} s/pixel")
    print(f"wrote {path}")
    return 0


def _cmd_inspect(args) -> int:
    from .checkpoint import load_checkpoint
    ckpt = load_checkpoint(args.checkpoint)
    print(f"version: {ckpt.version}")
    print("config:")
    for line in ckpt.config_text.splitlines():
        print(f"  {line}")
    print(f"arrays: {len(ckpt.arrays)}")
    for name, dtype, shape in ckpt.manifest:
        print(f"  {name}  {dtype.name}  {list(shape)}")
    return 0


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "verify": _cmd_verify, "bench": _cmd_bench,
            "inspect-checkpoint": _cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
