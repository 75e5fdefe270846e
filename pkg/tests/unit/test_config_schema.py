"""Tests for the config_schema module."""

from typing import Any

import pytest

from oneshot_eki.config_schema import (
    PRESETS,
    ExperimentConfig,
    RuntimeOptions,
)
from oneshot_eki.exceptions import (
    ConfigValidationError,
    InvalidConfigurationKeyError,
    UnknownScheduleError,
    UnsupportedModelError,
)


def test_defaults_are_the_linear_preset() -> None:
    """ExperimentConfig() is the one-dimensional linear experiment."""
    config = ExperimentConfig()
    assert config == PRESETS["oned_linear"]
    assert config.is_linear
    assert config.is_one_dimensional
    assert not config.uses_network
    assert config.uses_continuous_schedule


@pytest.mark.parametrize("name", ["oned_linear", "oned_nonlinear", "twod_poisson", "custom"])
def test_presets_validate(name: str) -> None:
    """Every preset passes validation."""
    assert ExperimentConfig.for_experiment(name).validate() is PRESETS[name]


def test_unknown_experiment() -> None:
    """for_experiment rejects names without a preset."""
    with pytest.raises(ConfigValidationError):
        ExperimentConfig.for_experiment("threed")


def test_from_dict_starts_from_named_preset() -> None:
    """Values are applied on top of the preset named by `experiment`."""
    config = ExperimentConfig.from_dict({"experiment": "twod_poisson", "seed": 5})
    assert config.n_u == 95
    assert config.continuous_schedule == "ode_inv_sq"
    assert config.seed == 5


def test_from_dict_rejects_unknown_keys() -> None:
    """Keys outside the schema raise InvalidConfigurationKeyError."""
    with pytest.raises(InvalidConfigurationKeyError):
        ExperimentConfig.from_dict({"learning_rate": 0.1})


def test_with_overrides_normalizes_values() -> None:
    """Lists become tuples and the original is left unchanged."""
    base = ExperimentConfig()
    config = base.with_overrides({"hidden_layers": [3, 2], "t_end": 5.0})
    assert config.hidden_layers == (3, 2)
    assert config.t_end == 5.0
    assert base.t_end == 1e10
    with pytest.raises(InvalidConfigurationKeyError):
        base.with_overrides({"nope": 1})


def test_to_sections_round_trips() -> None:
    """Flattening the sections reproduces the configuration."""
    config = PRESETS["oned_nonlinear"]
    sections = config.to_sections()
    assert "lambda0" not in sections["schedule"]
    assert sections["network"]["hidden_layers"] == [10, 10]
    flat = {key: value for table in sections.values() for key, value in table.items()}
    assert ExperimentConfig.from_dict(flat) == config


@pytest.mark.parametrize(
    ("method", "uses_network", "discrete", "continuous"),
    [
        ("redTik", False, False, False),
        ("osEKI_1", False, True, False),
        ("osQN_1", False, True, False),
        ("nnosEKI_2", True, False, True),
    ],
)
def test_method_properties(method: str, uses_network: bool, discrete: bool, continuous: bool) -> None:
    """Method names determine the surrogate and the schedule kind."""
    config = ExperimentConfig(method=method)
    assert config.uses_network is uses_network
    assert config.uses_discrete_schedule is discrete
    assert config.uses_continuous_schedule is continuous


@pytest.mark.parametrize(
    "overrides",
    [
        {"method": "osEKI_3"},
        {"model": "heat"},
        {"experiment": "threed"},
        {"n_u": 0},
        {"n_u": True},
        {"ensemble_size": 1},
        {"hidden_layers": ()},
        {"hidden_layers": (10, 0)},
        {"seed": -1},
        {"beta": 0.0},
        {"obs_noise": float("inf")},
        {"alpha2": -1.0},
        {"t_end": float("nan")},
        {"lambda0": -0.5},
        {"qn_c1": 0.95},
        {"obs_step": 0.2},
    ],
)
def test_validation_errors(overrides: dict[str, Any]) -> None:
    """Out-of-range values raise ConfigValidationError."""
    with pytest.raises(ConfigValidationError):
        ExperimentConfig().with_overrides(overrides).validate()


def test_tikhonov_needs_linear_model() -> None:
    """redTik on the nonlinear model is rejected."""
    config = PRESETS["oned_nonlinear"].with_overrides({"method": "redTik"})
    with pytest.raises(UnsupportedModelError):
        config.validate()


@pytest.mark.parametrize("field", ["discrete_schedule", "continuous_schedule"])
def test_unknown_schedule(field: str) -> None:
    """Schedule names must be registered for their kind."""
    swapped = {"discrete_schedule": "ode_inv", "continuous_schedule": "cubic_k3"}
    with pytest.raises(UnknownScheduleError):
        ExperimentConfig().with_overrides({field: swapped[field]}).validate()


def test_two_dimensional_mesh_size() -> None:
    """Without a mesh file the reference mesh fixes n_u = 95."""
    with pytest.raises(ConfigValidationError, match="95"):
        PRESETS["twod_poisson"].with_overrides({"n_u": 64}).validate()
    PRESETS["twod_poisson"].with_overrides({"n_u": 64, "mesh_file": "other.mesh"}).validate()


def test_zero_lambda0_is_allowed() -> None:
    """λ₀ = 0 passes validation; the schedule decides whether it is usable."""
    assert ExperimentConfig(lambda0=0.0).validate().lambda0 == 0.0


def test_runtime_options_items() -> None:
    """Only fields that are set are listed."""
    assert RuntimeOptions().items() == []
    assert RuntimeOptions(workers=3, log_format="json").items() == [("log_format", "json"), ("workers", 3)]
