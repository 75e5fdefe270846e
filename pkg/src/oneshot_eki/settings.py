"""Runtime settings module (Singleton Pattern with Properties).

This module defines the `Settings` class, a process-wide singleton for the
options that control how a run is executed but never what it computes:
verbosity, log destination and format, the number of worker threads for
forward evaluations, and the root directory for run artifacts.

Numeric settings live in `ExperimentConfig` instead, so that an artifact
directory's config snapshot alone reproduces its results.
"""

from pathlib import Path

# Keep these specific to avoid circular imports
from oneshot_eki.config_schema import RuntimeOptions
from oneshot_eki.exceptions import SettingsValidationError

LOG_FORMATS = ("text", "json")


class Settings:
    """Manages runtime settings using properties and validating setters.

    Attributes:
        _instance: The singleton instance of the Settings class.
    """

    _instance: "Settings | None" = None

    def __new__(cls) -> "Settings":
        """Create the Settings instance if one doesn't exist.

        Returns:
            The Settings instance.
        """
        if not cls._instance:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self) -> None:
        """Set defaults once; later constructions return the same state."""
        if hasattr(self, "_initialized"):
            return  # Prevent re-initialization

        self._verbosity_level: int = 0
        self._log_file: Path | None = None
        self._log_format: str = "text"
        self._workers: int = 1
        self._output_dir: Path = Path("runs")

        self._initialized = True

    def load(self, options: RuntimeOptions) -> None:
        """Apply the explicitly provided runtime options.

        Args:
            options: Options whose None fields are skipped.
        """
        for name, value in options.items():
            setattr(self, name, value)

    @property
    def verbosity_level(self) -> int:
        """Get the verbosity level."""
        return self._verbosity_level

    @verbosity_level.setter
    def verbosity_level(self, value: int) -> None:
        """Set the verbosity level with validation.

        Args:
            value: The new verbosity level (an integer).
        """
        self._validate_integer_is_not_negative("verbosity_level", value)
        self._verbosity_level = value

    @property
    def log_file(self) -> Path | None:
        """Get the log file path, or None when logging to the console only."""
        return self._log_file

    @log_file.setter
    def log_file(self, value: str | Path | None) -> None:
        """Set the log file path.

        Args:
            value: The new path, or None to disable file logging.
        """
        self._log_file = None if value is None else Path(value)

    @property
    def log_format(self) -> str:
        """Get the log file format, `text` or `json`."""
        return self._log_format

    @log_format.setter
    def log_format(self, value: str) -> None:
        """Set the log file format.

        Args:
            value: Must be `text` or `json`.
        """
        if value not in LOG_FORMATS:
            raise SettingsValidationError("log_format", "Must be one of [text, json].")
        self._log_format = value

    @property
    def workers(self) -> int:
        """Get the number of threads for particle and gradient evaluations."""
        return self._workers

    @workers.setter
    def workers(self, value: int) -> None:
        """Set the worker count with validation.

        Args:
            value: A positive integer.
        """
        self._validate_integer_is_positive("workers", value)
        self._workers = value

    @property
    def output_dir(self) -> Path:
        """Get the root directory for run artifacts."""
        return self._output_dir

    @output_dir.setter
    def output_dir(self, value: str | Path) -> None:
        """Set the artifact root directory.

        Args:
            value: The new directory (either a string or a Path object).
        """
        self._output_dir = Path(value)

    @staticmethod
    def _validate_integer_is_positive(field_name: str, value: int) -> None:
        """Raise SettingsValidationError unless value >= 1."""
        if value < 1:
            raise SettingsValidationError(field_name, "Must be a positive integer")

    @staticmethod
    def _validate_integer_is_not_negative(field_name: str, value: int) -> None:
        """Raise SettingsValidationError if value < 0."""
        if value < 0:
            raise SettingsValidationError(field_name, "Must not be negative")
