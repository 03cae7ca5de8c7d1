"""
Command Line Interface

    python -m src.cli run --config config/default.yaml [--method galore-plus] [--rank 8] ...
    python -m src.cli compare --config config/default.yaml --sweep ratio=0,0.006,0.012,0.018 --seeds 4

Exit codes: 0 success, 1 configuration / usage / I/O error, 2 numerical abort.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import yaml
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from src import reporting
from src.config import DEFAULT_CONFIG_PATH, DEFAULT_OUTPUT_DIR, FIELD_ALIASES, load_raw, parse_config
from src.errors import ConfigError, GaloreError, NumericalError
from src.harness import compare, run, sweep_configs

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2

# Flags that override config values of the same (or aliased) name
OVERRIDE_FLAGS = ("method", "rank", "interval", "ratio", "seed", "steps", "out")


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=False, show_path=False)],
        force=True,
    )


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with the configuration exit code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="galore", description="Low-rank gradient projection experiments")
    parser.add_argument("--log-level", default=None, help="Logging level (default: $GALORE_LOG_LEVEL or INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Train one configuration")
    run_parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG_PATH, help="YAML run configuration")
    run_parser.add_argument("--method", help="dense-adamw, galore-exact, galore-rsvd, galore-plus or galore-plus-nores")
    run_parser.add_argument("--rank", type=int, help="Projection rank")
    run_parser.add_argument("--interval", type=int, help="Steps between projection refreshes")
    run_parser.add_argument("--ratio", type=float, help="Fraction of entries in the sparse residual")
    run_parser.add_argument("--seed", type=int, help="Run seed")
    run_parser.add_argument("--steps", type=int, help="Optimizer steps")
    run_parser.add_argument("--out", help="Output directory")

    compare_parser = commands.add_parser("compare", help="Run a sweep and compare the runs")
    compare_parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG_PATH, help="Base YAML configuration")
    compare_parser.add_argument("--sweep", help="field=v1,v2,... (e.g. ratio=0,0.006,0.012 or method=galore-exact,galore-plus)")
    compare_parser.add_argument("--seeds", type=int, default=1, help="Seeds per sweep value")
    compare_parser.add_argument("--workers", type=int, default=1, help="Runs executed concurrently")
    compare_parser.add_argument("--out", help="Output directory")
    return parser


def parse_sweep(text: str) -> Tuple[str, List[object]]:
    """Split "field=v1,v2" into the field and YAML-typed values."""
    if "=" not in text:
        raise ConfigError(f"expected field=v1,v2,..., got {text!r}", field="sweep")
    name, _, values = text.partition("=")
    name = name.strip()
    items = [yaml.safe_load(item) for item in values.split(",") if item.strip()]
    if not name or not items:
        raise ConfigError(f"expected field=v1,v2,..., got {text!r}", field="sweep")
    return name, items


def command_run(args: argparse.Namespace, console: Console) -> int:
    overrides = {FIELD_ALIASES.get(flag, flag): getattr(args, flag) for flag in OVERRIDE_FLAGS}
    config = parse_config(args.config, overrides, os.getenv("GALORE_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))
    result = run(config)
    reporting.print_summary(result.summary, console)
    console.print(f"Outputs written to {config.output_dir}")
    return EXIT_OK


def command_compare(args: argparse.Namespace, console: Console) -> int:
    raw, lines = load_raw(args.config)
    output = Path(args.out or raw.get("output_dir") or os.getenv("GALORE_OUTPUT_DIR", "runs/compare"))
    sweep_field, values = parse_sweep(args.sweep) if args.sweep else (None, [])
    runs = sweep_configs(raw, sweep_field, values, args.seeds, output, lines)
    report = compare(runs, output, workers=args.workers, sweep_field=sweep_field)
    reporting.print_comparison(list(report["runs"].items()), console)
    if report["ablation"] is not None:
        reporting.print_ablation("ratio", report["ablation"], report["flag"], console)
    console.print(f"Outputs written to {output}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or os.getenv("GALORE_LOG_LEVEL", "INFO"))
    console = Console()

    handlers = {"run": command_run, "compare": command_compare}
    try:
        return handlers[args.command](args, console)
    except NumericalError as exc:
        logger.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (GaloreError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
