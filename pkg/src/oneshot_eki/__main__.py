"""The main entry point for the oneshot-eki application.

Three subcommands are provided:

1.  `run <config>`: load an experiment configuration, apply command-line
    overrides, run the configured method together with its reference
    solution and write a run directory.
2.  `compare <dir>...`: print a table of final misfit, residual, distance to
    the reference and wall time for finished runs of one experiment.
3.  `mesh export`: write the shipped 2D reference mesh and a set of
    observation points drawn from `obs_seed`.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
numerical failures.
"""

import signal
import sys
from argparse import ArgumentParser, ArgumentTypeError, Namespace
from collections.abc import Sequence
from importlib.metadata import metadata
from pathlib import Path
from types import FrameType
from typing import Any, NoReturn

import numpy as np

from oneshot_eki import logging_config
from oneshot_eki.artifacts import RunArtifacts, write_vector
from oneshot_eki.config_loader import ConfigLoader
from oneshot_eki.config_schema import ExperimentConfig, RuntimeOptions
from oneshot_eki.exceptions import (
    ArtifactError,
    ConfigurationError,
    InvalidInputError,
    NumericalError,
)
from oneshot_eki.experiments import compare_runs, default_run_directory, run_experiment
from oneshot_eki.mesh import load_reference_mesh, sample_observation_points, write_mesh
from oneshot_eki.settings import Settings

logger = logging_config.get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3

DEFAULT_MESH_DIR = Path("mesh")
MESH_FILE_NAME = "unit_square_95.mesh"
OBS_POINTS_FILE_NAME = "observation_points.txt"


def _positive_int(string: str) -> int:
    """Parse a strictly positive integer argument.

    Raises:
        ArgumentTypeError: If the value is not an integer >= 1.
    """
    try:
        value = int(string)
    except ValueError as exc:
        raise ArgumentTypeError(f"Invalid integer '{string}'") from exc  # noqa: TRY003
    if value < 1:
        raise ArgumentTypeError(f"Expected a positive integer, got {value}")  # noqa: TRY003
    return value


def _positive_float(string: str) -> float:
    """Parse a strictly positive float argument.

    Raises:
        ArgumentTypeError: If the value is not a float > 0.
    """
    try:
        value = float(string)
    except ValueError as exc:
        raise ArgumentTypeError(f"Invalid number '{string}'") from exc  # noqa: TRY003
    if not value > 0:
        raise ArgumentTypeError(f"Expected a positive number, got {value}")  # noqa: TRY003
    return value


def _config_overrides_from_cli(args: Namespace) -> dict[str, Any]:
    """Extract experiment configuration overrides from CLI arguments.

    Only arguments explicitly provided by the user are included.

    Args:
        args: Parsed command-line arguments of the `run` subcommand.

    Returns:
        A dictionary of `ExperimentConfig` field overrides.
    """
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.t_end is not None:
        overrides["t_end"] = args.t_end
    if args.method is not None:
        overrides["method"] = args.method
    return overrides


def _runtime_options_from_cli(args: Namespace) -> RuntimeOptions:
    """Collect the runtime options given on the command line."""
    return RuntimeOptions(
        verbosity_level=args.verbose,
        log_file=args.log_file,
        log_format=args.log_format,
        workers=getattr(args, "workers", None),
        output_dir=getattr(args, "output_dir", None),
    )


def _parse_arguments(argv: Sequence[str] | None = None) -> Namespace:
    """Parse command-line arguments using argparse.

    Args:
        argv: Arguments to parse; `sys.argv[1:]` when None.

    Returns:
        A `Namespace` object containing the parsed command-line arguments.
    """
    project_metadata = metadata("oneshot-eki")

    parser = ArgumentParser(
        prog=project_metadata["Name"],
        description=project_metadata["Summary"],
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {project_metadata['Version']}",
    )

    # Shared by every subcommand
    general = ArgumentParser(add_help=False)
    logging_group = general.add_argument_group("Logging Options")
    logging_group.add_argument(
        "-v",
        "--verbose",
        action="count",
        help="Verbosity level. Can be specified multiple times. (-vvv)",
    )
    logging_group.add_argument(
        "--log-file",
        help="Path to the log file. If not specified, no file logging will occur.",
        type=Path,
    )
    logging_group.add_argument(
        "--log-format",
        help="Sets the log file format. Requires `--log-file` be configured.",
        choices=["text", "json"],
        type=str,
    )

    subparsers = parser.add_subparsers(dest="command", required=True)

    run = subparsers.add_parser(
        "run", parents=[general], help="Run an experiment and write its artifacts."
    )
    run.add_argument("config", help="Path to an experiment config (TOML or YAML).", type=Path)
    run.add_argument("--seed", help="Override the master random seed.", type=int)
    run.add_argument("--method", help="Override the configured method.", type=str)
    run.add_argument(
        "--t-end",
        dest="t_end",
        help="Override the final integration time of the EKI flow.",
        type=_positive_float,
    )
    run.add_argument(
        "--workers",
        help="Threads for particle and gradient evaluations.",
        type=_positive_int,
    )
    run.add_argument(
        "--out",
        help="Run directory. Defaults to <output-dir>/<experiment>/<method>.",
        type=Path,
    )
    run.add_argument(
        "--output-dir",
        dest="output_dir",
        help="Root directory for default run directories. Defaults to `runs`.",
        type=Path,
    )

    compare = subparsers.add_parser(
        "compare", parents=[general], help="Tabulate finished runs of one experiment."
    )
    compare.add_argument("runs", nargs="+", help="Run directories.", type=Path)
    compare.add_argument("--out", help="Also write the table to this file.", type=Path)

    mesh = subparsers.add_parser("mesh", help="Mesh utilities.")
    mesh_commands = mesh.add_subparsers(dest="mesh_command", required=True)
    export = mesh_commands.add_parser(
        "export",
        parents=[general],
        help="Write the 2D reference mesh and the observation points.",
    )
    export.add_argument(
        "--out",
        help=f"Output directory. Defaults to `{DEFAULT_MESH_DIR}`.",
        type=Path,
        default=DEFAULT_MESH_DIR,
    )
    export.add_argument(
        "--seed",
        help="Seed for the observation points. Defaults to the 2D preset's obs_seed.",
        type=int,
    )
    export.add_argument(
        "--n-y",
        dest="n_y",
        help="Number of observation points. Defaults to the 2D preset's n_y.",
        type=_positive_int,
    )

    return parser.parse_args(argv)


def _run_command(args: Namespace) -> int:
    """Execute `run <config>`."""
    settings = Settings()
    config = (
        ExperimentConfig.from_dict(ConfigLoader(args.config).load())
        .with_overrides(_config_overrides_from_cli(args))
        .validate()
    )
    out_dir = args.out or default_run_directory(config, settings.output_dir)
    logger.info("Running %s with %s", config.experiment, config.method)
    artifacts = run_experiment(config, out_dir, settings.workers)
    print(artifacts.directory)  # noqa: T201
    return EXIT_OK


def _compare_command(args: Namespace) -> int:
    """Execute `compare <dir>...`."""
    table = compare_runs([RunArtifacts.open(path) for path in args.runs])
    text = table.format()
    print(text)  # noqa: T201
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def _mesh_export_command(args: Namespace) -> int:
    """Execute `mesh export`."""
    preset = ExperimentConfig.for_experiment("twod_poisson")
    seed = preset.obs_seed if args.seed is None else args.seed
    count = preset.n_y if args.n_y is None else args.n_y

    args.out.mkdir(parents=True, exist_ok=True)
    mesh_path = args.out / MESH_FILE_NAME
    points_path = args.out / OBS_POINTS_FILE_NAME
    write_mesh(load_reference_mesh(), mesh_path)
    write_vector(points_path, sample_observation_points(count, np.random.default_rng(seed)))
    logger.info("Wrote %s and %d observation points to %s", mesh_path, count, points_path)
    print(mesh_path)  # noqa: T201
    print(points_path)  # noqa: T201
    return EXIT_OK


def _dispatch(args: Namespace) -> int:
    if args.command == "run":
        return _run_command(args)
    if args.command == "compare":
        return _compare_command(args)
    return _mesh_export_command(args)


def _main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, configure logging and run a subcommand.

    Args:
        argv: Arguments to parse; `sys.argv[1:]` when None.

    Returns:
        The process exit code.
    """
    args = _parse_arguments(argv)
    try:
        settings = Settings()
        settings.load(_runtime_options_from_cli(args))
        logging_config.initialize_logger(
            settings.verbosity_level, settings.log_file, settings.log_format
        )
        return _dispatch(args)
    except (ConfigurationError, InvalidInputError, ArtifactError) as exc:
        logger.error("%s", exc)  # noqa: TRY400
        return EXIT_CONFIG_ERROR
    except NumericalError as exc:
        logger.error("Numerical failure: %s", exc)  # noqa: TRY400
        return EXIT_NUMERICAL_ERROR


def _signal_handler(sig: int, _frame: FrameType | None) -> NoReturn:
    """Log the signal and exit with the conventional 128 + signal code.

    Args:
        sig: The signal number.
        _frame: The current stack frame, unused.
    """
    logger.error("Signal %s received. Exiting...", sig)
    sys.exit(128 + sig)


def main() -> None:
    """Synchronous entry point for the application.

    Installs handlers for `SIGINT` and `SIGTERM` and exits with the code
    returned by the selected subcommand.
    """
    signal.signal(signal.SIGINT, _signal_handler)
    signal.signal(signal.SIGTERM, _signal_handler)

    sys.exit(_main())


if __name__ == "__main__":
    main()
