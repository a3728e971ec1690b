"""Command-line entry point: ``evkf simulate|filter|compare|bounds``."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING

from .config import RunConfig, load_config
from .const import EXIT_CONFIG_ERROR, EXIT_FAILURE, EXIT_NUMERIC_ERROR, EXIT_OK
from .coordinator import TrialCoordinator
from .diagnostics import Ledger, aggregate, comparison_markdown, write_comparison
from .exceptions import ConfigError, EvkfError, NumericError

if TYPE_CHECKING:
    from collections.abc import Sequence

_LOGGER = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one sub-command per operation."""
    parser = argparse.ArgumentParser(
        prog="evkf", description="Exponential family variational Kalman filter experiments"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("simulate", "generate the datasets of a run"),
        ("filter", "train, freeze and evaluate a filter"),
        ("bounds", "filter with per-step bound and gap diagnostics"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, required=True, help="JSON run configuration")
        sub.add_argument("--out", type=str, default=None, help="output directory")
        sub.add_argument("--seed", type=int, default=None, help="base seed")
        sub.add_argument("--trials", type=int, default=None, help="number of trials")

    compare = commands.add_parser("compare", help="aggregate run ledgers into a table")
    compare.add_argument("ledgers", type=Path, nargs="+", help="ledger files or run directories")
    compare.add_argument("--config", type=Path, default=None, help="config supplying --out")
    compare.add_argument("--out", type=str, default=None, help="output directory")
    compare.add_argument(
        "--force", action="store_true", help="compare ledgers from different protocols"
    )
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be non-negative", path="seed")
    if args.trials is not None and args.trials < 1:
        raise ConfigError("--trials must be at least 1", path="trials")
    return cfg.with_overrides(out_dir=args.out, seed=args.seed, trials=args.trials)


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    paths = asyncio.run(TrialCoordinator(cfg).async_simulate())
    for path in paths:
        print(path)
    return EXIT_OK


def cmd_filter(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    ledger = asyncio.run(TrialCoordinator(cfg).async_filter())
    print(comparison_markdown(aggregate([ledger])), end="")
    return EXIT_OK


def cmd_bounds(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    ledger = asyncio.run(TrialCoordinator(cfg).async_bounds())
    for entry in ledger.trials:
        summary = entry.diagnostics.get("bounds", {})
        print(
            f"trial {entry.trial}: rows={summary.get('rows')} "
            f"min_gap={summary.get('min_gap')} mean_gap={summary.get('mean_gap')}"
        )
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    ledgers = [Ledger.load(path) for path in args.ledgers]
    rows = aggregate(ledgers, force=args.force)
    out = args.out
    if out is None and args.config is not None:
        out = load_config(args.config).out_dir
    if out is not None:
        write_comparison(Path(out), rows)
    print(comparison_markdown(rows), end="")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "bounds": cmd_bounds,
    "compare": cmd_compare,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return its exit code."""
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as err:
        _LOGGER.error("Configuration error: %s", err)
        return EXIT_CONFIG_ERROR
    except NumericError as err:
        _LOGGER.error("Numerical failure: %s", err)
        return EXIT_NUMERIC_ERROR
    except EvkfError:
        _LOGGER.exception("Run failed")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
