#!/usr/bin/env python3
"""Command-line entry point: train, eval, ablate, gradcheck, gen-data.

Exit codes: 0 = success, 1 = usage or configuration error, 2 = numeric
failure (non-finite value or failed gradient check), 3 = I/O, checkpoint or
dataset error. Errors go to stderr prefixed with ``MTCP ERROR:``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import textwrap
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple

from mtcp_benchkit import SyntheticDataset, dump_dataset
from mtcp_config import RunConfig, load_config
from mtcp_errors import CheckpointError, ConfigurationError, DatasetError, MtcpError, NumericError
from mtcp_gradsuite import DEFAULT_SEEDS, run_suite
from mtcp_harness import ablate, evaluate, load_grid, load_run, train

RED = "\033[91m"
YELLOW = "\033[93m"
GREEN = "\033[92m"
RESET = "\033[0m"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

# Dedicated flags win over --set; mapped onto config keys.
FLAG_KEYS = (
    ("epochs", "epochs"),
    ("seed", "seed"),
    ("scheme", "lps.scheme"),
    ("kappa", "lps.kappa"),
    ("out", "output_dir"),
)


def parse_seeds(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_assignment(text: str) -> Tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="Flat key = value run config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        type=parse_assignment,
        default=[],
        metavar="KEY=VALUE",
        help="Override one config key (repeatable), e.g. --set lps.kappa=7.5",
    )
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--scheme", default=None, help="lps, ew, ma, log-smoothing or prioritization-only")
    parser.add_argument("--kappa", type=float, default=None, help="Spread control factor")
    parser.add_argument("--out", default=None, help="Output directory")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: List[Tuple[str, Any]] = list(args.overrides)
    for flag, key in FLAG_KEYS:
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append((key, value))
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    """Build and return the argument parser."""
    parser = argparse.ArgumentParser(
        prog="mtcp",
        description="Multi-task dense prediction with coherence fusion, trace-back and loss prioritization.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=textwrap.dedent(
            """\
            examples:
              # Train with the default config
              mtcp train --out runs/lps

              # Equal weighting baseline, 10 epochs, different seed
              mtcp train --scheme ew --epochs 10 --seed 3 --out runs/ew

              # Re-evaluate a finished run on its validation split
              mtcp eval runs/lps

              # Architecture ablation over the grid's seeds, 4 processes
              mtcp ablate architecture --workers 4 --out runs/arch

              # Finite-difference gradient suite
              mtcp gradcheck --seeds 0,1,2,3,4
            """
        ),
    )
    group = parser.add_mutually_exclusive_group()
    group.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    group.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    train_parser = sub.add_parser("train", help="Train one run")
    add_config_flags(train_parser)

    eval_parser = sub.add_parser("eval", help="Evaluate a checkpoint")
    eval_parser.add_argument("run_dir", nargs="?", type=Path, help="Run directory with config.json and checkpoint")
    eval_parser.add_argument("--checkpoint", type=Path, default=None, help="Checkpoint file (with --config)")
    eval_parser.add_argument("--split", choices=("train", "val"), default="val")
    add_config_flags(eval_parser)

    ablate_parser = sub.add_parser("ablate", help="Run an ablation grid")
    ablate_parser.add_argument("grid", help="Built-in grid name or path to a grid YAML")
    ablate_parser.add_argument("--seeds", type=parse_seeds, default=None, help="Override the grid's seed list")
    ablate_parser.add_argument("--workers", type=int, default=1, help="Parallel runs")
    add_config_flags(ablate_parser)

    grad_parser = sub.add_parser("gradcheck", help="Finite-difference gradient suite")
    grad_parser.add_argument("--seeds", type=parse_seeds, default=DEFAULT_SEEDS)
    grad_parser.add_argument("--blocks", type=lambda s: [b for b in s.split(",") if b], default=[])

    data_parser = sub.add_parser("gen-data", help="Dump the synthetic dataset")
    data_parser.add_argument("--split", choices=("train", "val", "both"), default="both")
    add_config_flags(data_parser)
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _rule() -> None:
    print(f"{'=' * 60}")


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    record = train(config)
    final = record.final
    print(f"\n{'=' * 60}")
    print(f"Run Summary ({config.output_dir}):")
    print(f"  Epochs: {len(record.rows)}  Scheme: {config.lps.scheme}  Seed: {config.seed}")
    for name, value in final.metrics.items():
        print(f"  {name}: {value:.4f}")
    if final.coherence is not None:
        print(f"  coherence: {final.coherence:.4f}")
    print(f"  {GREEN}score{RESET}: {final.score:.4f}")
    _rule()
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if args.run_dir is not None:
        config, checkpoint = load_run(args.run_dir)
    elif args.checkpoint is not None and args.config is not None:
        config, checkpoint = resolve_config(args), args.checkpoint
    else:
        raise ConfigurationError("eval needs a run directory or --checkpoint with --config")
    result = evaluate(checkpoint, SyntheticDataset(config.data, config.data_seed, args.split), config)
    print(f"Evaluation of {checkpoint} on {args.split}:")
    for name, value in result.metrics.items():
        print(f"  {name}: {value:.4f}")
    if result.coherence is not None:
        print(f"  coherence: {result.coherence:.4f}")
    print(f"  {GREEN}score{RESET}: {result.score:.4f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    grid = load_grid(args.grid)
    if args.seeds:
        grid = dataclasses.replace(grid, seeds=args.seeds)
    report = ablate(config, grid, Path(config.output_dir), workers=args.workers)
    print(f"\n{'=' * 60}")
    print(f"Ablation {report['grid']} ({len(report['seeds'])} seeds, reference {report['reference']}):")
    for row in report["variants"]:
        marker = f"{YELLOW}ref{RESET}" if row["variant"] == report["reference"] else f"{row['wins_vs_reference']} wins"
        print(f"  {row['variant']:<28} score {row['score']:.4f}  [{marker}]")
    _rule()
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suite(args.seeds, args.blocks)
    failed = 0
    for result in results:
        if result.passed:
            print(f"{GREEN}✓{RESET} {result.block:<16} seed {result.seed}  {result.error:.2e}")
        else:
            failed += 1
            print(f"{RED}✗{RESET} {result.block:<16} seed {result.seed}  {result.error:.2e} > {result.tolerance:.0e}")
    print(f"\n{'=' * 60}")
    print("Gradient Check Summary:")
    print(f"  {GREEN}Passed{RESET}: {len(results) - failed}/{len(results)}")
    if failed:
        print(f"  {RED}Failed{RESET}: {failed}")
    _rule()
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    splits = ("train", "val") if args.split == "both" else (args.split,)
    out_dir = Path(config.output_dir)
    for split in splits:
        written = dump_dataset(SyntheticDataset(config.data, config.data_seed, split), out_dir)
        print(f"{GREEN}✓{RESET} {split}: {len(written)} samples → {out_dir}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
}


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    configure_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"MTCP ERROR: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DatasetError, OSError) as exc:
        print(f"MTCP ERROR: {exc}", file=sys.stderr)
        return EXIT_IO
    except MtcpError as exc:
        print(f"MTCP ERROR: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
