"""Tests for the settings module."""

from collections.abc import Generator
from pathlib import Path
from typing import Any
from unittest.mock import patch

import pytest

from oneshot_eki import Settings
from oneshot_eki.config_schema import RuntimeOptions
from oneshot_eki.exceptions import InvalidConfigurationKeyError, SettingsValidationError


@pytest.fixture
def settings() -> Generator[Settings, Any, None]:
    """Fixture to get the settings instance.

    Returns:
        Settings: A new instance of the Settings class.
    """
    with patch.object(Settings, "_instance", None):
        instance = Settings()
        yield instance


def test_singleton_pattern() -> None:
    """Verify that the Settings class is a Singleton."""
    settings1 = Settings()
    settings2 = Settings()
    assert settings1 is settings2


def test_defaults(settings: Settings) -> None:
    """Fresh settings log errors only, run serially and write to runs/."""
    assert settings.verbosity_level == 0
    assert settings.log_file is None
    assert settings.log_format == "text"
    assert settings.workers == 1
    assert settings.output_dir == Path("runs")


def test_log_file_setter(tmp_path: Path, settings: Settings) -> None:
    """Test setting the log_file attribute with a Path object or None."""
    new_log_file = tmp_path / "new_log.log"
    settings.log_file = new_log_file
    assert settings.log_file == new_log_file

    settings.log_file = str(new_log_file)
    assert settings.log_file == new_log_file

    settings.log_file = None
    assert settings.log_file is None


@pytest.mark.parametrize("log_format", ["text", "json"])
def test_log_format_setter(log_format: str, settings: Settings) -> None:
    """Test setting the log_format attribute with each supported value."""
    settings.log_format = log_format
    assert settings.log_format == log_format


def test_log_format_validation(settings: Settings) -> None:
    """Test setting the log_format attribute with an invalid value."""
    with pytest.raises(SettingsValidationError):
        settings.log_format = "invalid"


def test_workers_setter(settings: Settings) -> None:
    """Test setting the workers attribute with a valid integer."""
    settings.workers = 8
    assert settings.workers == 8


def test_workers_setter_validation(settings: Settings) -> None:
    """Test setting the workers attribute with invalid values."""
    with pytest.raises(SettingsValidationError):
        settings.workers = 0

    with pytest.raises(SettingsValidationError):
        settings.workers = -1

    with pytest.raises(TypeError):
        settings.workers = "invalid"  # type: ignore[assignment]


def test_output_dir_setter(tmp_path: Path, settings: Settings) -> None:
    """Test setting the output_dir attribute with a Path object or string."""
    new_output_dir = tmp_path / "new_runs"
    settings.output_dir = new_output_dir
    assert settings.output_dir == new_output_dir

    settings.output_dir = str(new_output_dir)
    assert settings.output_dir == new_output_dir


def test_verbosity_level_setter(settings: Settings) -> None:
    """Test setting the verbosity_level attribute with a valid integer."""
    settings.verbosity_level = 3
    assert settings.verbosity_level == 3


def test_verbosity_level_setter_validation(settings: Settings) -> None:
    """Test setting the verbosity_level attribute with invalid values."""
    with pytest.raises(SettingsValidationError):
        settings.verbosity_level = -1

    with pytest.raises(TypeError):
        settings.verbosity_level = "invalid"  # type: ignore[assignment]


def test_load_applies_only_set_options(tmp_path: Path, settings: Settings) -> None:
    """Fields left as None keep their current value."""
    settings.workers = 4
    settings.load(RuntimeOptions(verbosity_level=2, output_dir=tmp_path))
    assert settings.verbosity_level == 2
    assert settings.output_dir == tmp_path
    assert settings.workers == 4


def test_load_validates_values(settings: Settings) -> None:
    """Invalid runtime options are rejected by the setters."""
    with pytest.raises(SettingsValidationError):
        settings.load(RuntimeOptions(log_format="xml"))


def test_runtime_options_from_dict() -> None:
    """Unknown runtime keys raise InvalidConfigurationKeyError."""
    assert RuntimeOptions.from_dict({"workers": 2}).items() == [("workers", 2)]
    with pytest.raises(InvalidConfigurationKeyError):
        RuntimeOptions.from_dict({"threads": 2})
