"""Command-line front end: argument parsing, logging setup, progress display and exit codes."""

import argparse
import logging
import sys
from contextlib import contextmanager
from typing import List, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from src.cli.commands import CommandRunner
from src.cli.config import load_config
from src.models.data_models import RunSummary
from src.models.errors import CmpToolkitError
from src.services.dummy_fill import FillVerificationError
from src.services.fixtures import FIXTURES

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_VERIFICATION = 3

COMMANDS = ('density', 'thickness', 'fill', 'convert', 'gen-fixture', 'sweep')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', help="YAML run configuration")
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="Override one config key (repeatable)")
    common.add_argument('--input', metavar='PATH', help="Input layout")
    common.add_argument('--format', choices=['gds', 'text'], help="Input layout format")
    common.add_argument('--layer', dest='layers', type=int, action='append', metavar='N',
                        help="Feature layer (repeatable)")
    common.add_argument('--out', dest='out_dir', metavar='DIR', help="Output directory")
    common.add_argument('--threads', type=int, metavar='N', help="Worker cap")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help="Debug logging")
    verbosity.add_argument('-q', '--quiet', action='store_true', help="Warnings and errors only")

    parser = argparse.ArgumentParser(
        prog='cmp-density',
        description="Chip-level CMP pattern density, thickness and dummy-fill toolkit",
    )
    sub = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')
    sub.add_parser('density', parents=[common], help="Raw and effective pattern-density maps")
    sub.add_parser('thickness', parents=[common], help="Post-CMP thickness map and polish target")
    sub.add_parser('fill', parents=[common], help="Conventional and smart dummy fill")
    sub.add_parser('sweep', parents=[common], help="Line-array density versus pitch")
    convert = sub.add_parser('convert', parents=[common], help="Convert between GDS and text layouts")
    convert.add_argument('output', metavar='OUTPUT', help="Destination layout file")
    convert.add_argument('--output-format', choices=['gds', 'text'])
    fixture = sub.add_parser('gen-fixture', parents=[common], help="Write a synthetic test layout")
    fixture.add_argument('--fixture', choices=sorted(FIXTURES), help="Fixture name")
    fixture.add_argument('--seed', type=int, metavar='N', help="Random seed")
    fixture.add_argument('--output', metavar='PATH', help="Destination layout file")
    fixture.add_argument('--output-format', choices=['gds', 'text'])
    return parser


def setup_logging(verbose: bool = False, quiet: bool = False) -> Console:
    """Route all logging to standard error through rich."""
    console = Console(stderr=True)
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    handler = RichHandler(console=console, show_path=False, rich_tracebacks=verbose)
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]",
                        handlers=[handler], force=True)
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    return console


@contextmanager
def progress_display(console: Console, enabled: bool):
    """Yield a (fraction, message) callback drawing a rich bar on terminals, logging otherwise."""
    if not enabled:
        def log_progress(fraction: float, message: str) -> None:
            logger.debug("%3.0f%% %s", fraction * 100.0, message)
        yield log_progress
        return
    with Progress(TextColumn("{task.description}"), BarColumn(), TextColumn("{task.percentage:>3.0f}%"),
                  TimeElapsedColumn(), console=console, transient=True) as progress:
        task = progress.add_task("starting", total=1.0)

        def update(fraction: float, message: str) -> None:
            progress.update(task, completed=fraction, description=message)
        yield update


def print_summary(console: Console, summary: RunSummary) -> None:
    table = Table(title=summary.command, show_header=False, box=None)
    table.add_column("key", style="dim")
    table.add_column("value")
    for line in summary.to_key_value().splitlines()[1:]:
        key, _, value = line.partition('=')
        table.add_row(key, value)
    console.print(table)


def run(args: argparse.Namespace, console: Console) -> RunSummary:
    flags = {'input': args.input, 'format': args.format, 'layers': args.layers,
             'out_dir': args.out_dir, 'threads': args.threads}
    if args.command == 'gen-fixture':
        flags.update({'fixture': args.fixture, 'seed': args.seed})
    config = load_config(args.config, args.overrides, flags)
    with progress_display(console, console.is_terminal and not args.quiet) as progress:
        runner = CommandRunner(config, progress)
        if args.command == 'density':
            return runner.density()
        if args.command == 'thickness':
            return runner.thickness()
        if args.command == 'fill':
            return runner.fill()
        if args.command == 'sweep':
            return runner.sweep()
        if args.command == 'convert':
            return runner.convert(args.output, args.output_format)
        return runner.gen_fixture(args.output, args.output_format)


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    console = setup_logging(args.verbose, args.quiet)
    try:
        summary = run(args, console)
    except FillVerificationError as e:
        logger.error("verification failed: %s", e)
        return EXIT_VERIFICATION
    except CmpToolkitError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_ERROR
    for warning in summary.warnings:
        logger.warning(warning)
    if not args.quiet:
        print_summary(console, summary)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
