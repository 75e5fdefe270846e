"""Run artifact directories.

A run directory holds everything needed to inspect and reproduce a run:

* `config.yaml`: the full sectioned configuration snapshot,
* `seeds.yaml`: master, truth and observation seeds,
* `summary.yaml`: final misfit, residual and distance-to-reference values,
* `metadata.yaml`: timestamps, wall time and library versions,
* `truth.txt`, `data.txt`, `estimate_u.txt`, `estimate_state.txt`,
  `reference_u.txt`, `observation_points.txt`: numeric vectors,
* `trace.txt`: the per-checkpoint or per-stage trace table.

Numeric files use 17 significant digits, so doubles round-trip exactly.
Everything except `metadata.yaml` is a deterministic function of the
configuration snapshot.
"""

import platform
from collections.abc import Mapping
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from numpy.typing import ArrayLike

from oneshot_eki import logging_config
from oneshot_eki.config_loader import ConfigLoader
from oneshot_eki.config_schema import ExperimentConfig
from oneshot_eki.core import FloatArray
from oneshot_eki.exceptions import InvalidArtifactContentsError, OneShotEkiError

logger = logging_config.get_logger(__name__)

NUMBER_FORMAT = "%.17g"

CONFIG_FILE = "config.yaml"
SEEDS_FILE = "seeds.yaml"
SUMMARY_FILE = "summary.yaml"
METADATA_FILE = "metadata.yaml"
TRACE_FILE = "trace.txt"


def write_vector(path: Path, values: ArrayLike) -> None:
    """Write a vector, or a 2-D array row by row, with 17 significant digits."""
    arr = np.asarray(values, dtype=np.float64)
    np.savetxt(path, arr if arr.ndim > 1 else arr.reshape(-1, 1), fmt=NUMBER_FORMAT)


def read_vector(path: Path) -> FloatArray:
    """Read a file written by `write_vector`.

    Raises:
        InvalidArtifactContentsError: If the file is missing or unparsable.
    """
    try:
        table = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise InvalidArtifactContentsError(path) from exc
    return table[:, 0] if table.shape[1] == 1 else table


def write_columns(path: Path, columns: Mapping[str, ArrayLike]) -> None:
    """Write named columns of equal length as a whitespace-separated table.

    The first line is a `#` header with the column names. An empty mapping
    produces a header-only file.
    """
    names = list(columns)
    if not names:
        path.write_text("#\n", encoding="utf-8")
        return
    table = np.column_stack([np.asarray(columns[name], dtype=np.float64) for name in names])
    np.savetxt(path, table, fmt=NUMBER_FORMAT, header=" ".join(names), comments="# ")


def read_columns(path: Path) -> dict[str, FloatArray]:
    """Read a table written by `write_columns`.

    Raises:
        InvalidArtifactContentsError: If the file is missing or unparsable.
    """
    try:
        with path.open(encoding="utf-8") as handle:
            header = handle.readline()
        names = header.lstrip("#").split()
        if not names:
            return {}
        table = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise InvalidArtifactContentsError(path) from exc
    if table.size == 0:
        return {name: np.empty(0) for name in names}
    if table.shape[1] != len(names):
        raise InvalidArtifactContentsError(path)
    return {name: table[:, k] for k, name in enumerate(names)}


def _dump_yaml(path: Path, data: Mapping[str, Any]) -> None:
    path.write_text(yaml.safe_dump(dict(data), sort_keys=False), encoding="utf-8")


def _load_yaml(path: Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise InvalidArtifactContentsError(path) from exc
    if not isinstance(data, dict):
        raise InvalidArtifactContentsError(path)
    return data


def _package_version() -> str:
    try:
        return version("oneshot-eki")
    except PackageNotFoundError:
        return "unknown"


@dataclass(frozen=True, slots=True)
class RunArtifacts:
    """A run directory on disk."""

    directory: Path

    @classmethod
    def create(cls, directory: Path) -> "RunArtifacts":
        """Create (or reuse) the directory for a new run."""
        directory.mkdir(parents=True, exist_ok=True)
        return cls(directory)

    @classmethod
    def open(cls, directory: Path) -> "RunArtifacts":
        """Open an existing run directory.

        Raises:
            InvalidArtifactContentsError: If the directory or its config or
                summary file is missing.
        """
        for required in (directory, directory / CONFIG_FILE, directory / SUMMARY_FILE):
            if not required.exists():
                raise InvalidArtifactContentsError(required)
        return cls(directory)

    def path(self, name: str) -> Path:
        """Path of a file inside the run directory."""
        return self.directory / name

    # Writing
    def write_config(self, config: ExperimentConfig) -> None:
        """Write the configuration snapshot and the seed record."""
        _dump_yaml(self.path(CONFIG_FILE), config.to_sections())
        _dump_yaml(
            self.path(SEEDS_FILE),
            {"seed": config.seed, "truth_seed": config.truth_seed, "obs_seed": config.obs_seed},
        )

    def write_vectors(self, vectors: Mapping[str, ArrayLike | None]) -> None:
        """Write each non-None vector to `<name>.txt`."""
        for name, values in vectors.items():
            if values is not None:
                write_vector(self.path(f"{name}.txt"), values)

    def write_trace(self, columns: Mapping[str, ArrayLike]) -> None:
        """Write the trace table."""
        write_columns(self.path(TRACE_FILE), columns)

    def write_summary(self, summary: Mapping[str, Any]) -> None:
        """Write the summary record."""
        _dump_yaml(self.path(SUMMARY_FILE), summary)

    def write_metadata(self, wall_time: float, started: datetime) -> None:
        """Write timing and environment information."""
        _dump_yaml(
            self.path(METADATA_FILE),
            {
                "started": started.astimezone(timezone.utc).isoformat(),
                "finished": datetime.now(timezone.utc).isoformat(),
                "wall_time_seconds": float(wall_time),
                "oneshot_eki_version": _package_version(),
                "numpy_version": np.__version__,
                "python_version": platform.python_version(),
            },
        )

    # Reading
    def config(self) -> ExperimentConfig:
        """Rebuild the configuration from the snapshot.

        Raises:
            InvalidArtifactContentsError: If the snapshot cannot be loaded.
        """
        try:
            return ExperimentConfig.from_dict(ConfigLoader(self.path(CONFIG_FILE)).load())
        except OneShotEkiError as exc:
            raise InvalidArtifactContentsError(self.path(CONFIG_FILE)) from exc

    def summary(self) -> dict[str, Any]:
        """Load the summary record."""
        return _load_yaml(self.path(SUMMARY_FILE))

    def metadata(self) -> dict[str, Any]:
        """Load the metadata record, empty when absent."""
        path = self.path(METADATA_FILE)
        return _load_yaml(path) if path.exists() else {}

    def trace(self) -> dict[str, FloatArray]:
        """Load the trace table."""
        return read_columns(self.path(TRACE_FILE))

    def vector(self, name: str) -> FloatArray:
        """Load `<name>.txt`."""
        return read_vector(self.path(f"{name}.txt"))
