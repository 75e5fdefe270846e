"""Tests for the logging_config module."""

import json
import logging
from pathlib import Path

import numpy as np
import pytest

from oneshot_eki import logging_config
from oneshot_eki.logging_config import (
    ColorFormatter,
    JsonFormatter,
    UtcFormatter,
)
from oneshot_eki.logging_context import run_context


def _get_handler(logger: logging.Logger, cls: type) -> logging.Handler | None:
    return next((h for h in logger.handlers if isinstance(h, cls)), None)


@pytest.mark.parametrize(
    ("verbosity_level", "expected_level"),
    [
        (0, logging.ERROR),
        (1, logging.WARNING),
        (2, logging.INFO),
        (3, logging.DEBUG),
        (7, logging.DEBUG),
    ],
)
def test_console_handler_levels(verbosity_level: int, expected_level: int) -> None:
    """Each -v step lowers the console threshold until DEBUG."""
    assert logging_config.level_for_verbosity(verbosity_level) == expected_level
    logging_config.initialize_logger(verbosity_level=verbosity_level, log_file=None)
    logger = logging.getLogger("oneshot_eki")

    console_handler = _get_handler(logger, logging.StreamHandler)

    assert console_handler is not None
    assert console_handler.level == expected_level


def test_logs_to_console_but_not_file(tmp_path: Path) -> None:
    """Without a log file only the console handler is attached."""
    log_file = tmp_path / "test.log"

    logging_config.initialize_logger(verbosity_level=1, log_file=None)
    logger = logging.getLogger("oneshot_eki")

    assert _get_handler(logger, logging.FileHandler) is None
    assert not log_file.exists()


def test_file_handler_logs_debug_regardless_of_verbosity(tmp_path: Path) -> None:
    """Checkpoint diagnostics at DEBUG reach the file even at verbosity 0."""
    log_file = tmp_path / "test.log"

    logging_config.initialize_logger(verbosity_level=0, log_file=str(log_file))
    logger = logging_config.get_logger("oneshot_eki.eki")

    logger.debug("t=1.0000e-03 misfit=2.5e-01")

    file_handler = _get_handler(logging.getLogger("oneshot_eki"), logging.FileHandler)
    assert file_handler is not None
    assert file_handler.level == logging.DEBUG
    assert "misfit=2.5e-01" in log_file.read_text()


def test_log_format_text_creates_utc_formatter(tmp_path: Path) -> None:
    """The text file format stamps records in UTC."""
    log_file = tmp_path / "text.log"

    logging_config.initialize_logger(
        verbosity_level=2,
        log_file=str(log_file),
        log_format="text",
    )

    logger = logging.getLogger("oneshot_eki")

    file_handler = _get_handler(logger, logging.FileHandler)
    assert file_handler is not None
    assert isinstance(file_handler.formatter, UtcFormatter)

    logger.info("hello text format")

    logs = log_file.read_text()
    assert "hello text format" in logs
    assert logs.split()[0].endswith("Z")


def test_json_log_file_contains_valid_json(tmp_path: Path) -> None:
    """The JSON file format writes one parseable object per record."""
    log_file = tmp_path / "valid.json"

    logging_config.initialize_logger(
        verbosity_level=3,
        log_file=str(log_file),
        log_format="json",
    )

    logger = logging.getLogger("oneshot_eki")
    file_handler = _get_handler(logger, logging.FileHandler)
    assert file_handler is not None
    assert isinstance(file_handler.formatter, JsonFormatter)

    logger.warning("parseable JSON")

    parsed = json.loads(log_file.read_text().strip())

    assert parsed["message"] == "parseable JSON"
    assert parsed["level"] == "WARNING"
    assert parsed["timestamp"].endswith("Z")
    assert {"timestamp", "level", "run", "message", "module", "function", "line"} <= parsed.keys()


def test_json_metrics_are_nested(tmp_path: Path) -> None:
    """Solver numbers passed as extra metrics become a JSON object."""
    log_file = tmp_path / "metrics.json"
    logging_config.initialize_logger(verbosity_level=0, log_file=log_file, log_format="json")
    logger = logging_config.get_logger("oneshot_eki.eki")

    logger.debug(
        "checkpoint",
        extra={"metrics": {"time": np.float64(0.5), "misfit": 2.0, "lambda": None, "spread": np.inf}},
    )

    parsed = json.loads(log_file.read_text().strip())
    assert parsed["metrics"] == {"time": 0.5, "misfit": 2.0, "spread": "inf"}


def test_console_writes_to_stderr(capsys: pytest.CaptureFixture[str]) -> None:
    """Console records stay off stdout, which carries command output."""
    logging_config.initialize_logger(verbosity_level=2)
    logging_config.get_logger("oneshot_eki.experiments").info("set up")

    captured = capsys.readouterr()
    assert "set up" in captured.err
    assert captured.out == ""


def test_reinitializing_replaces_handlers(tmp_path: Path) -> None:
    """Calling initialize_logger twice leaves one handler of each kind."""
    logging_config.initialize_logger(verbosity_level=1, log_file=tmp_path / "a.log")
    logging_config.initialize_logger(verbosity_level=1, log_file=tmp_path / "b.log")

    handlers = logging.getLogger("oneshot_eki").handlers
    assert sum(isinstance(h, logging.FileHandler) for h in handlers) == 1
    assert len(handlers) == 2


def test_run_context_tags_records(tmp_path: Path) -> None:
    """The active run tag is written with every record."""
    log_file = tmp_path / "run.json"
    logging_config.initialize_logger(verbosity_level=0, log_file=log_file, log_format="json")
    logger = logging_config.get_logger("oneshot_eki.oneshot")

    token = run_context.set("oned_linear/osEKI_1/stage-3")
    try:
        logger.info("inside")
    finally:
        run_context.reset(token)
    logger.info("outside")

    first, second = (json.loads(line) for line in log_file.read_text().splitlines())
    assert first["run"] == "oned_linear/osEKI_1/stage-3"
    assert second["run"] == run_context.get()


def test_color_formatter_does_not_break_text_output(
    caplog: pytest.LogCaptureFixture,
) -> None:
    """Colored console output still contains the level and message."""
    logger = logging.getLogger("oneshot_eki.test_color")
    logger.setLevel(logging.DEBUG)
    logger.handlers.clear()

    handler = logging.StreamHandler()
    handler.setFormatter(ColorFormatter("%(levelname)-7s %(message)s"))
    logger.addHandler(handler)

    with caplog.at_level(logging.INFO, logger=logger.name):
        logger.info("color test")

    assert "color test" in caplog.text
    assert "INFO" in caplog.text


def test_color_formatter_colors_level_name() -> None:
    """Known level names are wrapped in ANSI codes, unknown ones are left alone."""
    formatter = ColorFormatter("%(levelname)-7s %(message)s")
    record = logging.LogRecord("oneshot_eki", logging.WARNING, __file__, 1, "msg", None, None)
    assert formatter.format(record).startswith(ColorFormatter.COLORS["WARNING"])

    record.levelname = "NOTICE"
    assert formatter.format(record) == "NOTICE  msg"
