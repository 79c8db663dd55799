"""Command-line interface: ``lazy-descent <mode> [options]``.

Exit codes: 0 success, 2 configuration error, 3 every grid point failed
numerically, 4 I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from .sweep import MODES, PRESETS, ConfigError, load_preset, parse_config, run_sweep, emit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lazy-descent",
        description=(
            "Asymptotic theory and finite-size Monte Carlo sweeps for "
            "random-features ridge regression."
        ),
    )
    parser.add_argument("mode", choices=MODES, help="sweep mode")
    parser.add_argument("--config", help="YAML sweep configuration file")
    parser.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        help="named figure preset (used when --config is omitted)",
    )
    parser.add_argument("--out", help="output path (overrides the config's output)")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    parser.add_argument("--seed", type=int, help="replace the config's seed list with [SEED]")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.config is not None:
            try:
                with open(args.config, "r", encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                print(f"error: cannot read config: {exc}", file=sys.stderr)
                return EXIT_IO
            spec = parse_config(text)
        elif args.preset is not None:
            spec = load_preset(args.preset)
        else:
            print("error: one of --config or --preset is required", file=sys.stderr)
            return EXIT_CONFIG
        if spec.mode != args.mode:
            spec = replace(spec, mode=args.mode)
        if args.seed is not None:
            spec = replace(spec, seeds=[args.seed])
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_path = args.out if args.out is not None else spec.output_path
    if out_path is not None:
        parent = os.path.dirname(os.path.abspath(out_path))
        if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
            print(f"error: output path not writable: {out_path}", file=sys.stderr)
            return EXIT_IO

    rows = run_sweep(spec, jobs=args.jobs)
    n_ok = sum(1 for r in rows if r.get("converged"))
    try:
        text = emit(rows, format=args.format, path=out_path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if out_path is None:
        sys.stdout.write(text)
    else:
        print(f"wrote {len(rows)} rows ({n_ok} converged) to {out_path}", file=sys.stderr)
    if n_ok == 0:
        print("error: no grid point converged", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
