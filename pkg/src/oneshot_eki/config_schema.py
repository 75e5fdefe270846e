"""Configuration schema definitions.

This module defines the canonical experiment configuration for oneshot-eki.
`ExperimentConfig` holds every numeric setting of a run; its defaults for
each named experiment are kept in `PRESETS`. `RuntimeOptions` holds the
settings that never change results (logging, worker count, output
location).

Both classes are immutable and side-effect free. They sit between raw
configuration data (files, CLI) and the objects built for a run.
"""

import dataclasses
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from oneshot_eki.exceptions import (
    ConfigValidationError,
    InvalidConfigurationKeyError,
    UnknownScheduleError,
    UnsupportedModelError,
)
from oneshot_eki.oneshot import CONTINUOUS_SCHEDULES, DISCRETE_SCHEDULES, SCHEDULES

EXPERIMENTS = ("oned_linear", "oned_nonlinear", "twod_poisson", "custom")
MODELS = ("reaction_diffusion_1d", "nonlinear_diffusion_1d", "poisson_2d")
LINEAR_MODELS = ("reaction_diffusion_1d", "poisson_2d")
METHODS = (
    "redTik",
    "redEKI",
    "redQN",
    "osEKI_1",
    "osEKI_2",
    "osQN_1",
    "nnosEKI_1",
    "nnosEKI_2",
    "nnosQN_1",
)

SECTIONS: dict[str, tuple[str, ...]] = {
    "experiment": ("experiment", "method", "model"),
    "discretization": ("n_u", "n_y", "obs_step", "source", "mesh_file"),
    "prior": ("beta", "nu", "tau"),
    "noise": ("obs_noise", "model_noise"),
    "regularization": ("alpha1", "alpha2"),
    "ensemble": ("ensemble_size", "state_init_variance", "weight_init_variance"),
    "network": ("hidden_layers",),
    "schedule": (
        "discrete_schedule",
        "schedule_count",
        "schedule_power",
        "continuous_schedule",
        "lambda0",
        "penalty_cap",
    ),
    "integrator": ("t_end", "rtol", "atol", "stagnation_tol"),
    "quasi_newton": (
        "qn_max_iterations",
        "qn_gradient_tol",
        "qn_c1",
        "qn_c2",
        "qn_fd_step",
        "qn_warm_start",
    ),
    "seeds": ("seed", "truth_seed", "obs_seed"),
}

FIELD_SECTIONS: dict[str, str] = {name: section for section, names in SECTIONS.items() for name in names}


@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    """Numeric configuration of one experiment run.

    The defaults are the one-dimensional linear experiment. Use
    `for_experiment` to start from another preset.
    """

    # Experiment
    experiment: str = "oned_linear"
    method: str = "osEKI_2"
    model: str = "reaction_diffusion_1d"

    # Discretization
    n_u: int = 64
    n_y: int = 7
    obs_step: float = 1.0 / 16.0
    source: float = 10.0
    mesh_file: str | None = None

    # Prior
    beta: float = 5.0
    nu: float = 1.5
    tau: float = 0.0

    # Noise
    obs_noise: float = 0.1
    model_noise: float = 100.0

    # Regularization
    alpha1: float = 0.002
    alpha2: float = 0.0

    # Ensemble
    ensemble_size: int = 150
    state_init_variance: float = 5.0
    weight_init_variance: float = 1.0

    # Network
    hidden_layers: tuple[int, ...] = (10, 10)

    # Schedule
    discrete_schedule: str = "cubic_k3"
    schedule_count: int = 50
    schedule_power: float = 3.0
    continuous_schedule: str = "ode_inv"
    lambda0: float | None = None
    penalty_cap: float = 1e12

    # Integrator
    t_end: float = 1e10
    rtol: float = 1e-6
    atol: float = 1e-9
    stagnation_tol: float = 1e-12

    # Quasi-Newton
    qn_max_iterations: int = 200
    qn_gradient_tol: float = 1e-6
    qn_c1: float = 1e-4
    qn_c2: float = 0.9
    qn_fd_step: float = 1e-6
    qn_warm_start: bool = True

    # Seeds
    seed: int = 0
    truth_seed: int = 1
    obs_seed: int = 2

    @classmethod
    def for_experiment(cls, experiment: str) -> "ExperimentConfig":
        """Return the preset for a named experiment.

        Raises:
            ConfigValidationError: If the experiment is unknown.
        """
        if experiment not in PRESETS:
            raise ConfigValidationError("experiment", f"Must be one of {list(EXPERIMENTS)}")
        return PRESETS[experiment]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        """Create a configuration from flattened mapping data.

        Values are applied on top of the preset named by `experiment`
        (default `oned_linear`).

        Args:
            data: A flat mapping produced by `ConfigLoader`.

        Returns:
            The configuration.

        Raises:
            InvalidConfigurationKeyError: If the mapping contains unsupported keys.
        """
        unknown = [key for key in data if key not in FIELD_SECTIONS]
        if unknown:
            raise InvalidConfigurationKeyError(unknown)
        base = cls.for_experiment(str(data.get("experiment", "oned_linear")))
        return base.with_overrides(data)

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        """Return a new configuration with the provided overrides applied.

        Args:
            overrides: A mapping of field names to override values.

        Returns:
            A new `ExperimentConfig`.

        Raises:
            InvalidConfigurationKeyError: If overrides contain unsupported keys.
        """
        values = dict(overrides)
        if "hidden_layers" in values and values["hidden_layers"] is not None:
            values["hidden_layers"] = tuple(int(n) for n in values["hidden_layers"])
        if values.get("mesh_file") is not None:
            values["mesh_file"] = str(values["mesh_file"])
        try:
            return replace(self, **values)
        except TypeError as exc:
            raise InvalidConfigurationKeyError(list(values)) from exc

    def to_sections(self) -> dict[str, dict[str, Any]]:
        """Return the sectioned mapping used for config files and snapshots.

        Fields set to None are left out, so the mapping is valid TOML.
        """
        sections: dict[str, dict[str, Any]] = {}
        for section, names in SECTIONS.items():
            entries: dict[str, Any] = {}
            for name in names:
                value = getattr(self, name)
                if value is None:
                    continue
                entries[name] = list(value) if isinstance(value, tuple) else value
            sections[section] = entries
        return sections

    @property
    def is_linear(self) -> bool:
        """True when the configured model is linear."""
        return self.model in LINEAR_MODELS

    @property
    def is_one_dimensional(self) -> bool:
        """True for the models on (0, π)."""
        return self.model != "poisson_2d"

    @property
    def uses_network(self) -> bool:
        """True for the neural-network one-shot methods."""
        return self.method.startswith("nnos")

    @property
    def uses_discrete_schedule(self) -> bool:
        """True for methods that step a discrete penalty schedule."""
        return self.method.endswith("_1")

    @property
    def uses_continuous_schedule(self) -> bool:
        """True for methods that integrate the penalty flow."""
        return self.method.endswith("_2")

    def validate(self) -> "ExperimentConfig":
        """Check values and method/model combinations.

        Returns:
            The configuration itself, for chaining.

        Raises:
            ConfigValidationError: If a value is out of range.
            UnsupportedModelError: If the method needs a linear model.
            UnknownScheduleError: If a schedule name is not registered.
        """
        self._validate_choice("experiment", self.experiment, EXPERIMENTS)
        self._validate_choice("method", self.method, METHODS)
        self._validate_choice("model", self.model, MODELS)
        if self.method == "redTik" and not self.is_linear:
            raise UnsupportedModelError("redTik")
        if self.discrete_schedule not in DISCRETE_SCHEDULES:
            raise UnknownScheduleError(self.discrete_schedule, list(SCHEDULES))
        if self.continuous_schedule not in CONTINUOUS_SCHEDULES:
            raise UnknownScheduleError(self.continuous_schedule, list(SCHEDULES))

        for name in ("n_u", "n_y", "schedule_count", "qn_max_iterations"):
            self._validate_integer_is_positive(name, getattr(self, name))
        if self.ensemble_size < 2:  # noqa: PLR2004
            raise ConfigValidationError("ensemble_size", "Must be at least 2")
        if not self.hidden_layers or any(n < 1 for n in self.hidden_layers):
            raise ConfigValidationError("hidden_layers", "Must be a non-empty list of positive integers")
        for name in ("seed", "truth_seed", "obs_seed"):
            self._validate_integer_is_not_negative(name, getattr(self, name))

        for name in (
            "beta",
            "nu",
            "obs_noise",
            "model_noise",
            "alpha1",
            "state_init_variance",
            "weight_init_variance",
            "schedule_power",
            "penalty_cap",
            "rtol",
            "atol",
            "stagnation_tol",
            "qn_gradient_tol",
            "qn_fd_step",
            "source",
        ):
            self._validate_float_is_positive(name, getattr(self, name))
        for name in ("tau", "alpha2", "t_end"):
            self._validate_float_is_not_negative(name, getattr(self, name))
        if self.lambda0 is not None:
            self._validate_float_is_not_negative("lambda0", self.lambda0)
        if not 0 < self.qn_c1 < self.qn_c2 < 1:
            raise ConfigValidationError("qn_c1, qn_c2", "Wolfe constants need 0 < c1 < c2 < 1")

        if self.is_one_dimensional:
            self._validate_float_is_positive("obs_step", self.obs_step)
            if self.n_y * self.obs_step >= 1:
                raise ConfigValidationError("obs_step", "Observation points must lie inside (0, pi)")
        elif self.mesh_file is None and self.n_u != 95:  # noqa: PLR2004
            raise ConfigValidationError("n_u", "The reference mesh has 95 interior nodes")
        return self

    @staticmethod
    def _validate_choice(field_name: str, value: str, choices: tuple[str, ...]) -> None:
        if value not in choices:
            raise ConfigValidationError(field_name, f"Must be one of {list(choices)}")

    @staticmethod
    def _validate_integer_is_positive(field_name: str, value: int) -> None:
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ConfigValidationError(field_name, "Must be a positive integer")

    @staticmethod
    def _validate_integer_is_not_negative(field_name: str, value: int) -> None:
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ConfigValidationError(field_name, "Must not be negative")

    @staticmethod
    def _validate_float_is_positive(field_name: str, value: float) -> None:
        if not (isinstance(value, int | float) and value > 0 and math.isfinite(value)):
            raise ConfigValidationError(field_name, "Must be a positive finite number")

    @staticmethod
    def _validate_float_is_not_negative(field_name: str, value: float) -> None:
        if not (isinstance(value, int | float) and value >= 0 and math.isfinite(value)):
            raise ConfigValidationError(field_name, "Must be a non-negative finite number")


PRESETS: dict[str, ExperimentConfig] = {
    "oned_linear": ExperimentConfig(),
    "oned_nonlinear": ExperimentConfig(
        experiment="oned_nonlinear",
        method="nnosEKI_2",
        model="nonlinear_diffusion_1d",
        beta=1.0,
        nu=2.0,
        obs_noise=1e-4,
        model_noise=10.0,
        alpha1=2.0,
        continuous_schedule="ode_const",
    ),
    "twod_poisson": ExperimentConfig(
        experiment="twod_poisson",
        method="nnosEKI_2",
        model="poisson_2d",
        n_u=95,
        n_y=50,
        beta=100.0,
        nu=2.0,
        tau=1.0,
        obs_noise=0.01,
        model_noise=0.1,
        ensemble_size=300,
        continuous_schedule="ode_inv_sq",
    ),
    "custom": ExperimentConfig(experiment="custom"),
}


@dataclass(frozen=True, slots=True)
class RuntimeOptions:
    """Runtime settings that do not affect numeric results.

    Fields left as None keep the current `Settings` value.
    """

    verbosity_level: int | None = None
    log_file: Path | None = None
    log_format: str | None = None
    workers: int | None = None
    output_dir: Path | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RuntimeOptions":
        """Create runtime options from a mapping.

        Raises:
            InvalidConfigurationKeyError: If the mapping contains unsupported keys.
        """
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfigurationKeyError(list(data)) from exc

    def items(self) -> list[tuple[str, Any]]:
        """Return (name, value) pairs of the fields that are set."""
        return [
            (field.name, getattr(self, field.name))
            for field in dataclasses.fields(self)
            if getattr(self, field.name) is not None
        ]
