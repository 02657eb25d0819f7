"""Command-line driver of the Floquet operator lab.

Example usage:
    python -m scripts.floquet_lab evolve \
    --config configs/default.toml \
    --set model.t=0.7071067811865476 \
    --set experiment.n_max=100 \
    --out runs/evolve

    python -m scripts.floquet_lab beta search --mode empirical --out runs/beta

Subcommands: operator check, operator export, evolve, lyapunov, spectrum,
clark, average, beta search, verify, report. Exit codes: 0 ok, 2 invalid
input, 3 budget exceeded (partial result), 4 numerical failure.
"""

import argparse
import logging
import sys

from src.components.config import load_config
from src.components.errors import ValidationError
from src.components.runner import COMMANDS, run


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Floquet operator experiments.")
    parser.add_argument(
        "command",
        nargs="+",
        help=f"Subcommand, one of: {', '.join(COMMANDS)}.",
    )
    parser.add_argument(
        "--config", type=str, default=None, help="Path to a TOML config file."
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override a config value (repeatable).",
    )
    parser.add_argument(
        "--out", type=str, default=None, help="Output directory for artifacts."
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="Seed of randomized experiments."
    )
    parser.add_argument(
        "--mode",
        choices=["rigorous", "empirical"],
        default=None,
        help="Construction mode of `beta search`.",
    )
    parser.add_argument(
        "--threads", type=int, default=1, help="Worker threads for grid runs."
    )
    parser.add_argument(
        "--no-cache", action="store_true", help="Neither read nor write the cache."
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging.")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    overrides = list(args.overrides)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            logging.error(f"Seed must be an unsigned 64-bit integer: {args.seed}")
            return ValidationError.exit_code
        overrides.append(f"experiment.seed={args.seed}")
    if args.mode is not None:
        overrides.append(f'construction.mode="{args.mode}"')
    try:
        config = load_config(args.config, overrides)
    except ValidationError as e:
        logging.error(str(e))
        return e.exit_code
    outcome = run(
        " ".join(args.command),
        config,
        out_dir=args.out,
        threads=args.threads,
        use_cache=not args.no_cache,
    )
    for path in outcome.artifacts:
        print(path)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
