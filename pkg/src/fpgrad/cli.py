"""Command-line front end.

    fpgrad approx-error --config cfg.json [--out file.csv] [--seed N] [--threads N]
    fpgrad bilevel      --config cfg.json ...
    fpgrad bounds       --config cfg.json ...
    fpgrad eqm          --config cfg.json ...   (out path is a directory)
    fpgrad plot --csv file.csv --x t --y err --group-by method --log-y --out fig.svg

Configs are JSON objects validated against the per-command schema (unknown
keys rejected). --out and --seed override the config's out_path / seed.
Errors exit nonzero with a one-line message on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, FpgradError
from .experiments import RUNNERS, validate_config
from .plotting import emit_plot


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpgrad",
        description="Hypergradient approximation benchmarks for fixed-point bilevel problems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("approx-error", "error of ITD/AID estimates vs the reference hypergradient"),
        ("bilevel", "hypergradient descent with step-size grid search"),
        ("bounds", "measured errors next to the theoretical bounds (br only)"),
        ("eqm", "equilibrium-model training sweep"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the JSON experiment config")
        cmd.add_argument("--out", default=None, help="output CSV path (eqm: directory)")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--threads", type=int, default=1, help="worker threads for grid points")

    plot = sub.add_parser("plot", help="render a grouped mean/std line chart from a CSV")
    plot.add_argument("--csv", required=True, help="input CSV path")
    plot.add_argument("--x", required=True, help="x column")
    plot.add_argument("--y", required=True, help="y column")
    plot.add_argument("--group-by", default=None, help="column defining one line per value")
    plot.add_argument("--log-y", action="store_true", help="logarithmic y axis")
    plot.add_argument("--out", required=True, help="output SVG path")
    plot.add_argument("--title", default=None, help="optional figure title")
    return parser


def _run_experiment(args: argparse.Namespace) -> None:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
    cfg = validate_config(args.command, raw)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_path"] = args.out
    if not cfg.get("out_path"):
        raise ConfigError("no output path: set 'out_path' in the config or pass --out")
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    path = RUNNERS[args.command](cfg, threads=args.threads)
    print(path)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            print(
                emit_plot(
                    args.csv,
                    x=args.x,
                    y=args.y,
                    out_path=args.out,
                    group_by=args.group_by,
                    log_y=args.log_y,
                    title=args.title,
                )
            )
        else:
            _run_experiment(args)
    except (FpgradError, OSError, ValueError) as exc:
        print(f"fpgrad: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
