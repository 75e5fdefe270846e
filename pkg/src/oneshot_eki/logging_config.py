"""Logging setup for oneshot-eki.

`initialize_logger` attaches a console handler and, optionally, a file
handler to the package logger. Console output goes to stderr so that the
command line can print run directories and tables on stdout.

Solver modules log one DEBUG line per checkpoint and one INFO line per
penalty stage. They pass the numbers as `extra={"metrics": {...}}`, which
the JSON file format writes as a nested object. Every record also carries
the active run tag from `oneshot_eki.logging_context.run_context`.
"""

import json
import logging
import sys
import time
from collections.abc import Mapping
from pathlib import Path
from typing import Any, ClassVar, TextIO

from oneshot_eki.logging_context import run_context

PACKAGE_LOGGER = __name__.split(".")[0]
VERBOSITY_LEVELS = (logging.ERROR, logging.WARNING, logging.INFO, logging.DEBUG)
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
LEVEL_WIDTH = 7
TEXT_LAYOUT = "%(levelname)-7s %(run)-28s %(message)s"


def level_for_verbosity(verbosity_level: int) -> int:
    """Console level for a `-v` count; anything above 3 is DEBUG."""
    return VERBOSITY_LEVELS[min(max(verbosity_level, 0), len(VERBOSITY_LEVELS) - 1)]


class ColorFormatter(logging.Formatter):
    """Wrap the padded level name in an ANSI color."""

    COLORS: ClassVar[dict[str, str]] = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[41m",
    }
    RESET: ClassVar[str] = "\033[0m"

    def format(self, record: logging.LogRecord) -> str:
        """Format the record, then color its level name if it is a known one."""
        text = super().format(record)
        color = self.COLORS.get(record.levelname)
        if color is None:
            return text
        padded = record.levelname.ljust(LEVEL_WIDTH)
        return text.replace(padded, f"{color}{padded}{self.RESET}", 1)


class UtcFormatter(logging.Formatter):
    """Formatter whose `%(asctime)s` is in UTC."""

    converter = time.gmtime


class JsonFormatter(UtcFormatter):
    """One JSON object per line.

    Keys are `timestamp`, `level`, `run`, `message`, `module`, `function`
    and `line`. `metrics` is added when the record carries solver numbers,
    and `exc_info` when an exception is attached.
    """

    def format(self, record: logging.LogRecord) -> str:
        """Serialize a record.

        Args:
            record: The log record to format.

        Returns:
            A single-line JSON string.
        """
        entry: dict[str, Any] = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "run": str(getattr(record, "run", PACKAGE_LOGGER)),
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }
        metrics = getattr(record, "metrics", None)
        if isinstance(metrics, Mapping):
            entry["metrics"] = {
                str(key): _json_number(value) for key, value in metrics.items() if value is not None
            }
        if record.exc_info:
            entry["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(entry, separators=(",", ":"), sort_keys=True)


def _json_number(value: Any) -> Any:
    """Plain floats for numpy scalars; non-finite values become strings."""
    try:
        number = float(value)
    except (TypeError, ValueError):
        return str(value)
    return number if abs(number) < float("inf") else str(number)


class RunContextFilter(logging.Filter):
    """Copy the active run tag onto each record as `record.run`."""

    def filter(self, record: logging.LogRecord) -> bool:
        """Tag the record; never drops it."""
        record.run = run_context.get()
        return True


def _console_handler(level: int, context_filter: logging.Filter) -> logging.Handler:
    handler: logging.StreamHandler[TextIO] = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)
    handler.setFormatter(ColorFormatter(TEXT_LAYOUT))
    handler.addFilter(context_filter)
    return handler


def _file_handler(log_file: str | Path, log_format: str, context_filter: logging.Filter) -> logging.Handler:
    handler = logging.FileHandler(log_file, mode="w", encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    if log_format == "json":
        handler.setFormatter(JsonFormatter(datefmt=TIMESTAMP_FORMAT))
    else:
        handler.setFormatter(UtcFormatter(f"%(asctime)s {TEXT_LAYOUT}", datefmt=TIMESTAMP_FORMAT))
    handler.addFilter(context_filter)
    return handler


def initialize_logger(
    verbosity_level: int, log_file: str | Path | None = None, log_format: str = "text"
) -> None:
    """Configure the package logger, replacing any earlier handlers.

    The console level follows `verbosity_level`. The log file, when given,
    always receives DEBUG records so the per-checkpoint solver trace is kept
    even for quiet runs.

    Args:
        verbosity_level: 0 for ERROR, 1 for WARNING, 2 for INFO, 3 or more
            for DEBUG.
        log_file: Optional path of the log file, truncated on open.
        log_format: `text` or `json` for the log file.
    """
    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(logging.DEBUG)
    for handler in logger.handlers:
        handler.close()
    logger.handlers.clear()
    logger.filters.clear()

    context_filter = RunContextFilter()
    logger.addFilter(context_filter)
    logger.addHandler(_console_handler(level_for_verbosity(verbosity_level), context_filter))
    if log_file:
        logger.addHandler(_file_handler(log_file, log_format, context_filter))


def get_logger(name: str) -> logging.Logger:
    """Return the logger for a module, usually `get_logger(__name__)`.

    Handlers are attached once by `initialize_logger`.
    """
    return logging.getLogger(name)
