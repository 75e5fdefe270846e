"""Shared fixtures for the unit tests."""

from collections.abc import Callable, Generator

import numpy as np
import pytest

from oneshot_eki import Settings
from oneshot_eki.core import GaussianPrior, WeightedMetric
from oneshot_eki.fem import LinearForwardModel, ObservationOperator
from oneshot_eki.mesh import Grid1D
from oneshot_eki.nn import IdentitySurrogate
from oneshot_eki.oneshot import AugmentedSystem

ScalarSystemFactory = Callable[..., AugmentedSystem]


@pytest.fixture(autouse=True)
def reset_singletons() -> Generator[None, None, None]:
    """Fixture to reset the singleton instances after each test.

    This ensures that each test gets a clean, independent instance of each singleton,
    preventing test contamination.
    """
    yield
    Settings._instance = None


@pytest.fixture
def small_grid() -> Grid1D:
    """An eight-node grid on (0, π)."""
    return Grid1D(8)


@pytest.fixture
def rng() -> np.random.Generator:
    """A seeded generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def scalar_system() -> ScalarSystemFactory:
    """Factory for the scalar one-shot problem.

    The model residual is p − u, the observation is p, the datum is 1 and
    the prior is N(0, 1), so the loss at penalty λ and weight α₁ is
    ½(p − 1)² + (λ/2)(p − u)² + (α₁/2)u².

    Returns:
        A callable taking `penalty`, `alpha1` and `alpha2` keywords.
    """

    def build(penalty: float = 1.0, alpha1: float = 1.0, alpha2: float = 0.0) -> AugmentedSystem:
        model = LinearForwardModel(np.array([[1.0]]), np.array([[1.0]]), [0.5], name="scalar")
        return AugmentedSystem(
            model=model,
            obs=ObservationOperator.from_matrix([[1.0]]),
            data=np.array([1.0]),
            surrogate=IdentitySurrogate(1),
            prior=GaussianPrior([0.0], [1.0], [[1.0]]),
            model_noise=WeightedMetric.identity(1),
            obs_noise=WeightedMetric.identity(1),
            alpha1=alpha1,
            alpha2=alpha2,
            penalty=penalty,
        )

    return build
