"""Configuration loader for oneshot-eki.

Experiment configurations are TOML files with one table per section
(`[prior]`, `[noise]`, ...), as shipped under `configs/`. Run snapshots are
written as YAML with the same sections, so the loader reads both. The
sections are flattened into the mapping `ExperimentConfig.from_dict`
expects.

TOML files are parsed with `tomllib` (or `tomli` on Python <3.11) and YAML
files with `yaml.safe_load`.
"""

import sys
from pathlib import Path
from typing import Any, TypeAlias

import yaml

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from oneshot_eki.config_schema import SECTIONS
from oneshot_eki.exceptions import (
    ConfigFileNotFoundError,
    InvalidConfigFileContentsError,
    InvalidConfigurationKeyError,
)

ConfigDict: TypeAlias = dict[str, Any]

YAML_SUFFIXES = (".yaml", ".yml")


def flatten_sections(data: dict[str, Any]) -> ConfigDict:
    """Flatten a sectioned mapping into field names and values.

    Args:
        data: Mapping of section name to a table of fields.

    Returns:
        The flat mapping.

    Raises:
        InvalidConfigurationKeyError: If a section is unknown, or a field is
            placed in a section it does not belong to.
    """
    flat: ConfigDict = {}
    invalid: list[str] = []
    for section, table in data.items():
        if section not in SECTIONS or not isinstance(table, dict):
            invalid.append(section)
            continue
        for key, value in table.items():
            if key not in SECTIONS[section]:
                invalid.append(f"{section}.{key}")
                continue
            flat[key] = value
    if invalid:
        raise InvalidConfigurationKeyError(invalid)
    return flat


class ConfigLoader:
    """Load and flatten an experiment configuration file.

    Instances do not mutate global state and are safe for reuse.
    """

    def __init__(self, config_file: str | Path) -> None:
        """Parse the configuration file.

        Args:
            config_file: Path to a `.toml`, `.yaml` or `.yml` file.

        Raises:
            ConfigFileNotFoundError: If the file does not exist.
            InvalidConfigFileContentsError: If the file cannot be parsed or
                does not contain any section.
            InvalidConfigurationKeyError: If the file has unknown sections or keys.
        """
        self._config_file = Path(config_file)
        if not self._config_file.exists():
            raise ConfigFileNotFoundError(self._config_file)
        self._config_data = flatten_sections(self._parse(self._config_file))

    @property
    def config_file(self) -> Path:
        """The parsed file."""
        return self._config_file

    def load(self) -> ConfigDict:
        """Return the flattened configuration.

        Returns:
            A dictionary of field names to values.
        """
        # Return a shallow copy to avoid external mutation
        return self._config_data.copy()

    @staticmethod
    def _parse(path: Path) -> dict[str, Any]:
        """Read the sectioned mapping from TOML or YAML.

        Raises:
            InvalidConfigFileContentsError: If parsing fails or the file is empty.
        """
        text = path.read_text(encoding="utf-8")
        if path.suffix in YAML_SUFFIXES:
            try:
                data = yaml.safe_load(text)
            except yaml.YAMLError as exc:
                raise InvalidConfigFileContentsError(path, str(exc)) from exc
        else:
            try:
                data = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise InvalidConfigFileContentsError(path, str(exc)) from exc

        if not isinstance(data, dict) or not data:
            raise InvalidConfigFileContentsError(path, "no configuration sections found")
        return data
