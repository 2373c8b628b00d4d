"""Command line entry point: ``p2pfl-sim {run,verify,presets,replay}``.

Exit status is 0 on success, 2 for an invalid configuration, 3 when a run
aborts on an invariant breach, 4 for I/O errors and 5 when a finished record
cannot be analysed.
"""

import argparse
import json
import logging
import os
import sys

from . import __version__
from . import analysis
from . import io
from . import presets
from . import simulation
from . import util

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BREACH = 3
EXIT_IO = 4
EXIT_ANALYSIS = 5

LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)


def _add_config_arguments(parser):
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", help="Path to a JSON or YAML run config")
    source.add_argument("--preset", help="Name of a preset scenario")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a scenario field (dotted key, JSON value)",
    )
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--workers", type=int, help="Worker threads")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="p2pfl-sim", description="Robust Bayesian peer-to-peer federated learning simulator"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="More logging (repeat for debug)"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a scenario and write records and a summary")
    _add_config_arguments(run)
    run.add_argument("--out", help=f"Output directory (default ${io.OUTPUT_ENV} or ./{io.DEFAULT_OUTPUT})")
    run.add_argument("--format", choices=io.FORMATS, help="Record table format")

    verify = commands.add_parser("verify", help="Check the standing assumptions without running")
    _add_config_arguments(verify)
    verify.add_argument("--horizon", type=int, help="Ticks covered by the connectivity search")

    commands.add_parser("presets", help="List the available presets")

    replay = commands.add_parser("replay", help="Recompute the summary of a finished run")
    replay.add_argument("directory", help="Output directory of an earlier run")
    replay.add_argument("--out", help="Write the summary here instead of standard output")
    return parser


def _resolve(args):
    if args.config is not None:
        data = io.load_document(args.config)
    elif args.preset is not None:
        data = {"schema": io.SCHEMA, "preset": args.preset}
    else:
        raise util.ConfigurationError("either --config or --preset is required")
    overrides = [io.parse_override(text) for text in args.overrides]
    return io.resolve_config(
        data,
        overrides=overrides,
        seed=args.seed,
        output_directory=getattr(args, "out", None),
        output_format=getattr(args, "format", None),
        workers=args.workers,
    )


def _configure_logging(verbosity):
    logging.basicConfig(
        level=LEVELS[min(verbosity, len(LEVELS) - 1)],
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    logging.captureWarnings(True)


def run(config):
    """Execute a resolved config and write its artifacts.

    Returns
    -------
    status : int
    """
    scenario = config.scenario
    directory = config.output_directory
    os.makedirs(directory, exist_ok=True)
    io.save_json(config.to_dict(), os.path.join(directory, io.RESOLVED_CONFIG_FILE))
    logger.info(
        f"Running {scenario.name}: {len(scenario.task.clients)} clients, "
        f"algorithm {scenario.algorithm}, seed {scenario.seed}, {config.workers} worker(s)"
    )
    try:
        record = simulation.simulate(scenario, workers=config.workers)
    except util.InvariantBreach as error:
        logger.error(str(error))
        path = io.save_record(error.record, directory, config.output_format)
        logger.info(f"Partial record saved to {path}")
        summary = analysis.breach_summary(error, scenario)
        io.save_json(summary, os.path.join(directory, io.SUMMARY_FILE))
        if summary["Vulnerability witness"]:
            logger.warning(
                f"{scenario.algorithm} diverged under {', '.join(summary['Model attacks'])}: "
                "vulnerability witness met"
            )
        return EXIT_BREACH
    path = io.save_record(record, directory, config.output_format)
    logger.info(f"Record saved to {path} ({len(record)} rows)")
    summary = analysis.evaluate(record, scenario)
    io.save_json(summary, os.path.join(directory, io.SUMMARY_FILE))
    for client, verdict in summary["Bias verdicts"].items():
        logger.info(f"client {client}: {verdict['verdict']} (error {verdict['error_inf']:.3g})")
    logger.info(f"Clean test MSE {summary['Clean test MSE']:.6g}")
    return EXIT_OK


def verify(config, horizon=None):
    """Print the assumption report of a resolved config as JSON."""
    report = presets.check_assumptions(config.scenario, horizon=horizon)
    print(json.dumps(report.to_dict(), indent=2))
    if not report.satisfied:
        logger.warning(f"{config.scenario.name} violates a standing assumption")
    return EXIT_OK


def replay(directory, out=None):
    """Recompute the summary of a finished run from its directory."""
    config = io.load_config(os.path.join(directory, io.RESOLVED_CONFIG_FILE))
    record = io.load_record(io.find_record(directory))
    summary = analysis.evaluate(record, config.scenario)
    if out is None:
        print(json.dumps(summary, indent=2))
    else:
        io.save_json(summary, out)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        if args.command == "presets":
            for name in presets.available_presets():
                print(name)
            return EXIT_OK
        if args.command == "replay":
            return replay(args.directory, args.out)
        config = _resolve(args)
        logging.getLogger().setLevel(LEVELS[min(max(args.verbose, config.verbosity), len(LEVELS) - 1)])
        if args.command == "verify":
            return verify(config, args.horizon)
        return run(config)
    except OSError as error:
        logger.error(f"I/O error: {error}")
        return EXIT_IO
    except util.AnalysisError as error:
        logger.error(f"Analysis failed: {error}")
        return EXIT_ANALYSIS
    except ValueError as error:
        logger.error(f"Invalid configuration: {error}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
