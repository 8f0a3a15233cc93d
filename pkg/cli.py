"""
Command-line entry point.

    python cli.py run scenarios/bulk_zero.scenario --seed 7 --trace --out out/
    python cli.py asm workloads/programs/bulk.cp -o bulk.mccp
    python cli.py disasm bulk.mccp

Exit codes: 0 ok, 1 assembler diagnostics, 2 configuration or I/O error,
3 workload result does not match its oracle, 4 deadlock.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from artifacts import write_image, write_stats, write_trace
from cp_lang.assembler import assemble, disassemble
from scenario import load_scenario, parse_overrides
from sim.engine import RunOutcome
from sim.errors import AssemblyError, MccSimError
from sim.settings import configure_logging
from sim.system import MccSystem
from sim.vm import ChannelProgramImage
from workloads.runners import prepare, run_prepared

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_DIAGNOSTICS = 1
EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_DEADLOCK = 4


def _error(message: str) -> None:
    print(f"[error] {message}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario, args.seed, parse_overrides(args.override))
    system = MccSystem(scenario.sim, scenario.nodes, keep_log=args.trace or scenario.trace)
    prepared = prepare(system, scenario)
    logger.info("running %s", scenario.name)
    outcome, run = run_prepared(system, prepared)

    out = Path(args.out)
    write_stats(out / "stats.csv", system.stats_rows())
    if args.trace or scenario.trace:
        write_trace(out / "trace.log", system.engine.log)
    print(f"trace_hash={system.engine.trace_hash()}")
    print(f"outcome={outcome.value} makespan_ns={system.makespan_ns}")

    if outcome is RunOutcome.DEADLOCK:
        _error(f"deadlock; waiting: {', '.join(system.engine.deadlock_suspects)}")
        return EXIT_DEADLOCK
    if run.error is not None:
        _error(f"workload failed: {run.error}")
        return EXIT_MISMATCH
    if not run.done:
        _error(f"workload unfinished at t={system.engine.now()} ({outcome.value})")
        return EXIT_MISMATCH
    problems = prepared.check(run.result)
    for problem in problems:
        _error(problem)
    return EXIT_MISMATCH if problems else EXIT_OK


def cmd_asm(args: argparse.Namespace) -> int:
    source = Path(args.source).read_text()
    result = assemble(source)
    if not result.ok:
        for diagnostic in result.diagnostics:
            print(f"{args.source}:{diagnostic}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    output = args.output or str(Path(args.source).with_suffix(".mccp"))
    write_image(output, result.image)
    print(f"[asm] {len(result.image)} instructions -> {output}")
    return EXIT_OK


def cmd_disasm(args: argparse.Namespace) -> int:
    image = ChannelProgramImage.from_bytes(Path(args.image).read_bytes())
    sys.stdout.write(disassemble(image))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Memory channel controller simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", help="path to a .scenario file")
    run.add_argument("--seed", type=lambda text: int(text, 0), help="override the scenario seed")
    run.add_argument("--trace", action="store_true", help="write trace.log")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="override one simulator setting (repeatable)")
    run.add_argument("--out", default=".", help="directory for stats.csv and trace.log")
    run.add_argument("--progress", action="store_true", help="show progress bars")
    run.set_defaults(handler=cmd_run)

    asm = commands.add_parser("asm", help="assemble channel-program source into an image")
    asm.add_argument("source")
    asm.add_argument("-o", "--output", help="image path (default: source with .mccp)")
    asm.set_defaults(handler=cmd_asm)

    disasm = commands.add_parser("disasm", help="print the source of an image")
    disasm.add_argument("image")
    disasm.set_defaults(handler=cmd_disasm)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    if getattr(args, "progress", False):
        os.environ["MCCSIM_PROGRESS"] = "1"
    try:
        return args.handler(args)
    except AssemblyError as exc:
        for diagnostic in exc.diagnostics:
            print(str(diagnostic), file=sys.stderr)
        return EXIT_DIAGNOSTICS
    except (MccSimError, OSError) as exc:
        _error(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
