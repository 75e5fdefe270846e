"""Defines custom error classes for the oneshot-eki package.

The errors are grouped into three families that the command line maps to
exit codes: configuration problems (exit 2), invalid inputs to the numeric
routines (exit 2) and numerical failures (exit 3). Artifact errors are raised
while reading or comparing run directories.
"""

from pathlib import Path


class OneShotEkiError(Exception):
    """Base error class for oneshot-eki."""


# Configuration
class ConfigurationError(OneShotEkiError):
    """Base error class for invalid configuration."""


class ConfigFileNotFoundError(ConfigurationError):
    """Raised when the provided config file is not found."""

    def __init__(self, file_path: Path) -> None:
        """Initializes ConfigFileNotFoundError with the missing file path.

        Args:
            file_path: The path to the config file that was not found.
        """
        super().__init__(f"Config file not found: {file_path}")


class InvalidConfigFileContentsError(ConfigurationError):
    """Raised when a config file cannot be parsed or has no usable sections."""

    def __init__(self, file_path: Path, reason: str | None = None) -> None:
        """Initializes InvalidConfigFileContentsError.

        Args:
            file_path: The path to the file with invalid contents.
            reason: Optional detail from the parser.
        """
        message = f"Invalid config file contents in {file_path}"
        if reason:
            message = f"{message}: {reason}"
        super().__init__(message)


class InvalidConfigurationKeyError(ConfigurationError):
    """Raised when a configuration mapping contains unsupported keys."""

    def __init__(self, keys: list[str] | None = None) -> None:
        """Initializes InvalidConfigurationKeyError.

        Args:
            keys: The offending keys, if known.
        """
        if keys:
            super().__init__(f"Invalid configuration keys detected: {sorted(keys)}")
        else:
            super().__init__("Invalid configuration keys detected.")


class ConfigValidationError(ConfigurationError):
    """Raised when an experiment configuration value or combination is invalid."""

    def __init__(self, field_name: str, validation_error: str) -> None:
        """Initializes ConfigValidationError.

        Args:
            field_name: The name of the invalid field.
            validation_error: The message explaining the failure.
        """
        self.field_name = field_name
        super().__init__(f"Invalid value for '{field_name}': {validation_error}")


class SettingsValidationError(ConfigurationError):
    """Raised when a runtime Setting value does not validate successfully."""

    def __init__(self, field_name: str, validation_error: str) -> None:
        """Initializes SettingsValidationError with the invalid Setting name.

        Args:
            field_name: The name of the invalid Setting.
            validation_error: The message explaining the failure.
        """
        super().__init__(f"Invalid value for '{field_name}': {validation_error}")


class UnsupportedModelError(ConfigurationError):
    """Raised when an operation requires a linear forward model."""

    def __init__(self, operation: str) -> None:
        """Initializes UnsupportedModelError.

        Args:
            operation: The name of the operation that was requested.
        """
        super().__init__(f"{operation} requires a linear forward model")


class UnknownScheduleError(ConfigurationError):
    """Raised when a penalty schedule name is not a registered builtin."""

    def __init__(self, name: str, known: list[str]) -> None:
        """Initializes UnknownScheduleError.

        Args:
            name: The requested schedule name.
            known: The registered schedule names.
        """
        super().__init__(f"Unknown penalty schedule '{name}'. Known: {sorted(known)}")


# Invalid inputs
class InvalidInputError(OneShotEkiError):
    """Base error class for arguments rejected by the numeric routines."""


class DimensionMismatchError(InvalidInputError):
    """Raised when vector or matrix dimensions do not agree."""

    def __init__(self, what: str, expected: int, actual: int) -> None:
        """Initializes DimensionMismatchError.

        Args:
            what: Description of the mismatched quantity.
            expected: The expected dimension.
            actual: The dimension that was supplied.
        """
        self.expected = expected
        self.actual = actual
        super().__init__(f"Dimension mismatch for {what}: expected {expected}, got {actual}")


class EnsembleSizeError(InvalidInputError):
    """Raised when an ensemble has fewer than two particles."""

    def __init__(self, size: int) -> None:
        """Initializes EnsembleSizeError.

        Args:
            size: The number of particles supplied.
        """
        super().__init__(f"An ensemble needs at least 2 particles, got {size}")


class InvalidPriorError(InvalidInputError):
    """Raised when prior eigenpairs violate orthonormality or positivity."""

    def __init__(self, reason: str) -> None:
        """Initializes InvalidPriorError.

        Args:
            reason: The violated condition.
        """
        super().__init__(f"Invalid Gaussian prior: {reason}")


class InvalidMeshError(InvalidInputError):
    """Raised when a mesh fails validation or a mesh file cannot be parsed."""

    def __init__(self, reason: str) -> None:
        """Initializes InvalidMeshError.

        Args:
            reason: The violated condition.
        """
        super().__init__(f"Invalid mesh: {reason}")


class ObservationPointError(InvalidInputError):
    """Raised when an observation point lies outside the computational domain."""

    def __init__(self, point: tuple[float, ...]) -> None:
        """Initializes ObservationPointError.

        Args:
            point: Coordinates of the offending point.
        """
        super().__init__(f"Observation point outside the domain: {point}")


class InvalidArchitectureError(InvalidInputError):
    """Raised for network architectures with empty or non-positive layers."""

    def __init__(self, reason: str) -> None:
        """Initializes InvalidArchitectureError.

        Args:
            reason: The violated condition.
        """
        super().__init__(f"Invalid network architecture: {reason}")


class ScheduleError(InvalidInputError):
    """Raised when a penalty schedule is not strictly increasing or not positive."""

    def __init__(self, reason: str) -> None:
        """Initializes ScheduleError.

        Args:
            reason: The violated condition.
        """
        super().__init__(f"Invalid penalty schedule: {reason}")


# Numerical failures
class NumericalError(OneShotEkiError):
    """Base error class for failures inside a numeric computation."""


class NotPositiveDefiniteError(NumericalError):
    """Raised when a matrix expected to be SPD fails symmetry or factorization."""

    def __init__(self, what: str) -> None:
        """Initializes NotPositiveDefiniteError.

        Args:
            what: Description of the offending matrix.
        """
        super().__init__(f"Matrix is not symmetric positive definite: {what}")


class SingularSystemError(NumericalError):
    """Raised when a finite-element system cannot be factorized."""

    def __init__(self, what: str) -> None:
        """Initializes SingularSystemError.

        Args:
            what: Description of the system.
        """
        super().__init__(f"Singular linear system: {what}")


class CoefficientOverflowError(NumericalError):
    """Raised when exp(u) would overflow in the nonlinear diffusion model."""

    def __init__(self, max_abs: float) -> None:
        """Initializes CoefficientOverflowError.

        Args:
            max_abs: The largest absolute parameter value encountered.
        """
        super().__init__(f"Diffusion coefficient overflow: max |u| = {max_abs:.6g} > 700")


class NonFiniteForwardError(NumericalError):
    """Raised when a forward map returns NaN or infinite values."""

    def __init__(self, index: int | None = None) -> None:
        """Initializes NonFiniteForwardError.

        Args:
            index: The particle index whose image is not finite, or None for
                a single evaluation outside an ensemble.
        """
        self.index = index
        where = "the evaluated point" if index is None else f"particle {index}"
        super().__init__(f"Forward map returned non-finite values for {where}")


class IntegrationError(NumericalError):
    """Raised when the adaptive integrator fails, for example by step underflow."""

    def __init__(self, time: float, message: str) -> None:
        """Initializes IntegrationError.

        Args:
            time: The time reached when the integrator stopped.
            message: The solver's status message.
        """
        self.time = time
        super().__init__(f"Integration failed at t={time:.6g}: {message}")


# Artifacts
class ArtifactError(OneShotEkiError):
    """Base error class for run artifact directories."""


class InvalidArtifactContentsError(ArtifactError):
    """Raised when a run directory is missing files or holds unparsable data."""

    def __init__(self, file_path: Path) -> None:
        """Initializes InvalidArtifactContentsError.

        Args:
            file_path: The path to the missing or invalid artifact.
        """
        super().__init__(f"Invalid artifact contents in {file_path}")


class ComparisonError(ArtifactError):
    """Raised when runs cannot be compared."""

    def __init__(self, reason: str) -> None:
        """Initializes ComparisonError.

        Args:
            reason: Why the comparison was rejected.
        """
        super().__init__(f"Cannot compare runs: {reason}")
