"""Tests for the eki module."""

import math

import numpy as np
import pytest
from numpy.typing import ArrayLike
from scipy.integrate import solve_ivp

from oneshot_eki.core import Ensemble, WeightedMetric
from oneshot_eki.eki import (
    AuxiliaryFlow,
    InverseProblemSpec,
    NoiseBlock,
    default_checkpoints,
    eki_discrete_step,
    eki_vector_field,
    evaluate_ensemble,
    integrate_eki,
    mean_field_linear_reference,
)
from oneshot_eki.exceptions import (
    DimensionMismatchError,
    InvalidInputError,
    NonFiniteForwardError,
)


def _linear_spec(matrix: ArrayLike, data: ArrayLike) -> InverseProblemSpec:
    """G(v) = Av with identity noise."""
    a = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    return InverseProblemSpec(
        lambda v: a @ v, data, [NoiseBlock("obs", WeightedMetric.identity(a.shape[0]))]
    )


def _two_block_spec() -> InverseProblemSpec:
    return InverseProblemSpec(
        lambda v: v.copy(),
        [0.0, 0.0],
        [
            NoiseBlock("model", WeightedMetric.identity(1)),
            NoiseBlock("obs", WeightedMetric.identity(1)),
        ],
    )


# ---------------------------------------------------------------------------
# Problem definition
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("weight", [-1.0, math.inf, math.nan])
def test_noise_block_rejects_bad_weights(weight: float) -> None:
    """Weights must be finite and non-negative."""
    with pytest.raises(InvalidInputError):
        NoiseBlock("obs", WeightedMetric.identity(1), weight)


def test_spec_dimension_mismatch() -> None:
    """Block dimensions must add up to the data length."""
    with pytest.raises(DimensionMismatchError):
        InverseProblemSpec(lambda v: v, [0.0, 0.0, 0.0], [NoiseBlock("obs", WeightedMetric.identity(2))])


def test_misfit_and_block_weights() -> None:
    """Weights scale the precision of their block only."""
    spec = _two_block_spec()
    image = np.array([1.0, 2.0])
    assert spec.misfit(image) == pytest.approx(5.0)
    weighted = spec.with_weights({"model": 3.0})
    assert weighted.misfit(image) == pytest.approx(7.0)
    assert weighted.block_misfits(image) == pytest.approx({"model": 1.0, "obs": 4.0})
    assert spec.block_slice("obs") == slice(1, 2)
    with pytest.raises(KeyError):
        spec.block_slice("surrogate")


def test_precision_apply_uses_weight_and_covariance() -> None:
    """Γ⁻¹r = weight · cov⁻¹ r blockwise."""
    spec = InverseProblemSpec(lambda v: v, [0.0], [NoiseBlock("obs", WeightedMetric([[2.0]]), 4.0)])
    np.testing.assert_allclose(spec.precision_apply(np.array([3.0])), [6.0])
    np.testing.assert_allclose(spec.dense_covariance(), [[0.5]])


def test_zero_weight_has_no_covariance() -> None:
    """A zero-precision block contributes nothing but has no finite Γ."""
    spec = _two_block_spec().with_weights({"model": 0.0})
    assert spec.misfit([5.0, 1.0]) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        spec.dense_covariance()
    with pytest.raises(InvalidInputError):
        spec.noise_sqrt_apply(np.zeros(2))


# ---------------------------------------------------------------------------
# Forward evaluation and vector field
# ---------------------------------------------------------------------------


def test_non_finite_image_names_particle() -> None:
    """The first particle with a non-finite image is reported."""

    def forward(v: np.ndarray) -> np.ndarray:
        return np.array([math.nan]) if v[0] > 0.5 else v.copy()

    with pytest.raises(NonFiniteForwardError) as excinfo:
        evaluate_ensemble(forward, np.array([[0.0], [1.0], [0.0], [2.0]]))
    assert excinfo.value.index == 1


def test_threaded_evaluation_matches_serial(rng: np.random.Generator) -> None:
    """Evaluating with threads gives the same images in the same order."""
    a = rng.standard_normal((3, 4))
    particles = rng.standard_normal((6, 4))
    serial = evaluate_ensemble(lambda v: np.tanh(a @ v), particles)
    threaded = evaluate_ensemble(lambda v: np.tanh(a @ v), particles, workers=2)
    np.testing.assert_array_equal(serial, threaded)


def test_identical_particles_have_zero_field() -> None:
    """A collapsed ensemble does not move."""
    spec = _linear_spec([[1.0, 2.0]], [3.0])
    ens = Ensemble([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    np.testing.assert_array_equal(eki_vector_field(spec, ens), np.zeros((3, 2)))


def test_linear_field_is_preconditioned_gradient(rng: np.random.Generator) -> None:
    """For G = A the field is −C AᵀΓ⁻¹(Av⁽ʲ⁾ − y) with the empirical C."""
    a = np.array([[1.0, 0.5], [0.0, 2.0], [1.0, -1.0]])
    y = np.array([1.0, 0.0, 2.0])
    ens = Ensemble(rng.standard_normal((8, 2)))
    field = eki_vector_field(_linear_spec(a, y), ens)
    expected = -(ens.covariance() @ a.T @ (a @ ens.particles.T - y[:, None])).T
    np.testing.assert_allclose(field, expected, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(
        field.mean(axis=0), -ens.covariance() @ a.T @ (a @ ens.mean() - y), rtol=1e-10, atol=1e-12
    )


# ---------------------------------------------------------------------------
# Discrete update
# ---------------------------------------------------------------------------


def test_discrete_step_scalar_kalman_formula() -> None:
    """v̄₁ = v̄₀ + C/(C + h⁻¹)(y − v̄₀)."""
    spec = _linear_spec([[1.0]], [4.0])
    ens = Ensemble([[0.0], [2.0]])
    h = 0.5
    c = 1.0 / (1.0 + 1.0 / h)
    new = eki_discrete_step(spec, ens, h)
    assert new.mean()[0] == pytest.approx(1.0 + c * 3.0)


def test_discrete_step_keeps_collapsed_ensemble() -> None:
    """Zero covariances give a zero gain."""
    spec = _linear_spec([[1.0]], [4.0])
    ens = Ensemble([[1.0], [1.0]])
    np.testing.assert_array_equal(eki_discrete_step(spec, ens, 1.0).particles, ens.particles)


def test_unperturbed_step_is_deterministic(rng: np.random.Generator) -> None:
    """Two unperturbed steps from the same ensemble are bit-identical."""
    spec = _linear_spec([[1.0, 0.0], [1.0, 1.0]], [1.0, 2.0])
    ens = Ensemble(rng.standard_normal((5, 2)))
    first = eki_discrete_step(spec, ens, 0.3)
    second = eki_discrete_step(spec, ens, 0.3)
    np.testing.assert_array_equal(first.particles, second.particles)


def test_perturbed_step_is_seeded(rng: np.random.Generator) -> None:
    """Perturbed steps depend only on the seed and differ from the mean update."""
    spec = _linear_spec([[1.0, 0.0], [1.0, 1.0]], [1.0, 2.0])
    ens = Ensemble(rng.standard_normal((5, 2)))
    first = eki_discrete_step(spec, ens, 0.3, mode="perturbed", rng=np.random.default_rng(3))
    second = eki_discrete_step(spec, ens, 0.3, mode="perturbed", rng=np.random.default_rng(3))
    plain = eki_discrete_step(spec, ens, 0.3)
    np.testing.assert_array_equal(first.particles, second.particles)
    assert not np.allclose(first.particles, plain.particles)


def test_discrete_step_validation() -> None:
    """Bad step sizes, modes and missing generators are rejected."""
    spec = _linear_spec([[1.0]], [1.0])
    ens = Ensemble([[0.0], [1.0]])
    with pytest.raises(InvalidInputError):
        eki_discrete_step(spec, ens, 0.0)
    with pytest.raises(InvalidInputError):
        eki_discrete_step(spec, ens, 1.0, mode="perturbed")
    with pytest.raises(InvalidInputError):
        eki_discrete_step(spec, ens, 1.0, mode="sideways")  # type: ignore[arg-type]


def test_small_steps_approach_vector_field(rng: np.random.Generator) -> None:
    """(step(h) − v)/h tends to the continuous field as h → 0."""

    def forward(v: np.ndarray) -> np.ndarray:
        return np.array([v[0] + 0.1 * v[1] ** 2, np.sin(v[1])])

    spec = InverseProblemSpec(forward, [0.3, -0.2], [NoiseBlock("obs", WeightedMetric.identity(2))])
    ens = Ensemble(rng.standard_normal((5, 2)))
    h = 1e-6
    difference = (eki_discrete_step(spec, ens, h).particles - ens.particles) / h
    field = eki_vector_field(spec, ens)
    assert np.linalg.norm(difference - field) <= 1e-3 * np.linalg.norm(field)


# ---------------------------------------------------------------------------
# Continuous flow
# ---------------------------------------------------------------------------


def test_default_checkpoints() -> None:
    """Zero, then ten points per decade from 1e-3 to t_end."""
    times = default_checkpoints(1.0)
    assert times.shape == (32,)
    assert times[0] == 0.0
    assert times[1] == pytest.approx(1e-3)
    assert times[-1] == 1.0
    np.testing.assert_array_equal(default_checkpoints(0.0), [0.0])
    np.testing.assert_array_equal(default_checkpoints(1e-4), [0.0, 1e-4])


def test_zero_horizon_reports_initial_state() -> None:
    """t_end = 0 records only the initial ensemble."""
    spec = _linear_spec([[1.0]], [2.0])
    ens = Ensemble([[-1.0], [1.0]])
    report = integrate_eki(spec, ens, 0.0)
    np.testing.assert_array_equal(report.times, [0.0])
    np.testing.assert_array_equal(report.final_ensemble.particles, ens.particles)
    assert report.evaluations == 0


def test_negative_horizon_is_rejected() -> None:
    """t_end < 0 raises InvalidInputError."""
    with pytest.raises(InvalidInputError):
        integrate_eki(_linear_spec([[1.0]], [2.0]), Ensemble([[-1.0], [1.0]]), -1.0)


def test_scalar_flow_matches_closed_form() -> None:
    """With particles ±1, G = v, Γ = 1: C(t) = 1/(1 + 2t) and m(t) = y(1 − (1 + 2t)^(−1/2))."""
    y = 2.0
    report = integrate_eki(
        _linear_spec([[1.0]], [y]),
        Ensemble([[-1.0], [1.0]]),
        10.0,
        checkpoints=[1.0],
        rtol=1e-10,
        atol=1e-12,
        record_particles=True,
    )
    np.testing.assert_allclose(report.times, [0.0, 1.0, 10.0])
    for k, t in enumerate(report.times):
        expected = y * (1.0 - 1.0 / math.sqrt(1.0 + 2.0 * t))
        assert report.means[k, 0] == pytest.approx(expected, rel=1e-5, abs=1e-12)
    assert report.particles is not None
    for k, t in enumerate(report.times[1:], start=1):
        covariance = Ensemble(report.particles[k]).covariance()[0, 0]
        assert 1.0 / covariance - 1.0 == pytest.approx(2.0 * t, rel=1e-5)
        _, reference = mean_field_linear_reference([[1.0]], [[1.0]], [[1.0]], [0.0], [y], 2.0 * t)
        assert covariance == pytest.approx(reference[0, 0], rel=1e-5)


def test_three_dimensional_flow_matches_mean_field() -> None:
    """J = 200 on a 3D linear problem: C⁻¹(t) = C₀⁻¹ + 2tAᵀΓ⁻¹A and m(t) solves its mean ODE."""
    a = np.array([[1.0, 0.5, 0.0], [0.2, 1.0, 0.3], [0.0, 0.4, 1.5]])
    gamma = np.diag([0.5, 1.0, 2.0])
    y = np.array([1.0, -0.5, 2.0])
    spec = InverseProblemSpec(lambda v: a @ v, y, [NoiseBlock("obs", WeightedMetric(gamma))])
    ens = Ensemble(np.random.default_rng(7).standard_normal((200, 3)))
    report = integrate_eki(spec, ens, 10.0, checkpoints=[0.1, 1.0], record_particles=True)
    np.testing.assert_allclose(report.times, [0.0, 0.1, 1.0, 10.0])

    c0 = ens.covariance()
    m0 = ens.mean()
    information = a.T @ np.linalg.solve(gamma, a)
    pull = a.T @ np.linalg.solve(gamma, y)

    def mean_ode(t: float, m: np.ndarray) -> np.ndarray:
        precision = np.linalg.inv(c0) + 2.0 * t * information
        return np.linalg.solve(precision, pull - information @ m)

    reference = solve_ivp(mean_ode, (0.0, 10.0), m0, t_eval=report.times, rtol=1e-10, atol=1e-12)
    assert report.particles is not None
    for k, t in enumerate(report.times[1:], start=1):
        covariance = Ensemble(report.particles[k]).covariance()
        expected_precision = np.linalg.inv(c0) + 2.0 * t * information
        np.testing.assert_allclose(np.linalg.inv(covariance), expected_precision, rtol=2e-2)
        _, closed_form = mean_field_linear_reference(a, gamma, c0, m0, y, 2.0 * t)
        np.testing.assert_allclose(covariance, closed_form, rtol=2e-2, atol=1e-6)
        mean = report.means[k]
        assert np.linalg.norm(mean - reference.y[:, k]) <= 2e-2 * np.linalg.norm(reference.y[:, k])


def test_particles_stay_in_initial_affine_span(rng: np.random.Generator) -> None:
    """Every particle remains in the affine span of the initial ensemble."""
    a = np.array([[1.0, 0.2, 0.0], [0.0, 1.0, 0.5], [0.3, 0.0, 2.0]])
    ens = Ensemble(rng.standard_normal((3, 3)))
    report = integrate_eki(_linear_spec(a, [1.0, -1.0, 0.5]), ens, 100.0, record_particles=True)
    basis, _ = np.linalg.qr((ens.particles[1:] - ens.particles[0]).T)
    assert report.particles is not None
    for snapshot in report.particles:
        offsets = (snapshot - ens.particles[0]).T
        outside = offsets - basis @ (basis.T @ offsets)
        assert np.max(np.abs(outside)) <= 1e-8 * max(1.0, float(np.max(np.abs(snapshot))))


def test_linear_misfit_and_spread_decrease(rng: np.random.Generator) -> None:
    """For G = I the mean misfit and the spread never increase."""
    ens = Ensemble(rng.standard_normal((6, 2)))
    report = integrate_eki(_linear_spec(np.eye(2), [1.0, 2.0]), ens, 100.0)
    assert np.all(np.diff(report.misfit) <= 1e-8)
    assert np.all(np.diff(report.spread) <= 1e-8)
    assert np.all(report.spread >= 0)
    assert report.misfit.shape == report.times.shape == report.spread.shape


def test_linear_misfit_decreases_for_general_operator(rng: np.random.Generator) -> None:
    """The mean misfit is non-increasing for any linear G."""
    a = np.array([[2.0, 1.0], [0.0, 0.5], [1.0, 3.0]])
    ens = Ensemble(rng.standard_normal((4, 2)))
    report = integrate_eki(_linear_spec(a, [1.0, 0.0, -1.0]), ens, 100.0)
    assert np.all(np.diff(report.misfit) <= 1e-8)


def test_spanning_ensemble_finds_least_squares_solution() -> None:
    """With a spanning ensemble and invertible A the mean tends to A⁻¹y."""
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    y = np.array([1.0, 2.0])
    ens = Ensemble([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    report = integrate_eki(_linear_spec(a, y), ens, 1e10)
    np.testing.assert_allclose(report.final_mean, np.linalg.solve(a, y), atol=1e-3)


def test_permuting_particles_permutes_trajectories(rng: np.random.Generator) -> None:
    """Relabelling the initial particles relabels the whole trajectory."""
    a = np.array([[1.0, 0.5], [0.2, 1.5]])
    spec = _linear_spec(a, [0.5, 1.0])
    particles = rng.standard_normal((4, 2))
    perm = np.array([2, 0, 3, 1])
    first = integrate_eki(spec, Ensemble(particles), 10.0, record_particles=True)
    second = integrate_eki(spec, Ensemble(particles[perm]), 10.0, record_particles=True)
    assert first.particles is not None
    assert second.particles is not None
    np.testing.assert_allclose(second.particles, first.particles[:, perm], atol=1e-10)


def test_stagnated_ensemble_stops_early() -> None:
    """A collapsed ensemble at the data stops after one interval."""
    report = integrate_eki(_linear_spec([[1.0]], [2.0]), Ensemble([[2.0], [2.0]]), 1e6)
    assert report.stagnated
    assert report.times.shape == (2,)


def test_auxiliary_flow_is_integrated_jointly() -> None:
    """dλ/dt = 1 from λ = 0 gives λ(t) = t."""
    spec = _linear_spec([[1.0]], [2.0])
    flow = AuxiliaryFlow(initial=0.0, rate=lambda _lam: 1.0, apply=lambda _lam: spec)
    report = integrate_eki(spec, Ensemble([[-1.0], [1.0]]), 5.0, checkpoints=[1.0, 2.0])
    assert report.penalty is None
    report = integrate_eki(
        spec, Ensemble([[-1.0], [1.0]]), 5.0, checkpoints=[1.0, 2.0], auxiliary=flow
    )
    assert report.penalty is not None
    np.testing.assert_allclose(report.penalty, [0.0, 1.0, 2.0, 5.0], rtol=1e-8, atol=1e-12)
    assert "lambda" in report.columns()
    assert not report.saturated


def test_auxiliary_flow_cap_saturates() -> None:
    """λ starting above the cap is clamped and reported as saturated."""
    spec = _linear_spec([[1.0]], [2.0])
    flow = AuxiliaryFlow(initial=3.0, rate=lambda lam: lam, apply=lambda _lam: spec, cap=2.0)
    report = integrate_eki(spec, Ensemble([[-1.0], [1.0]]), 1.0, auxiliary=flow)
    assert report.penalty is not None
    np.testing.assert_array_equal(report.penalty, np.full(report.times.shape, 2.0))
    assert report.saturated


def test_diagnostics_are_recorded_per_checkpoint() -> None:
    """Diagnostic callbacks add one column entry per checkpoint."""
    spec = _linear_spec([[1.0]], [2.0])
    report = integrate_eki(
        spec,
        Ensemble([[-1.0], [1.0]]),
        1.0,
        diagnostics=lambda mean, _lam: {"mean": float(mean[0])},
    )
    np.testing.assert_allclose(report.diagnostics["mean"], report.means[:, 0])


# ---------------------------------------------------------------------------
# Mean-field reference
# ---------------------------------------------------------------------------


def test_reference_initial_condition() -> None:
    """At t = 0 the reference returns (v₀, C₀)."""
    c0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    m, c = mean_field_linear_reference(np.eye(2), np.eye(2), c0, [1.0, -1.0], [0.0, 0.0], 0.0)
    np.testing.assert_allclose(m, [1.0, -1.0])
    np.testing.assert_allclose(c, c0)


def test_reference_at_unit_time_is_posterior() -> None:
    """C(1) and m(1) match the conjugate Gaussian posterior."""
    a = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 1.0]])
    gamma = np.diag([0.5, 1.0, 2.0])
    c0 = np.array([[1.0, 0.3], [0.3, 2.0]])
    v0 = np.array([0.5, -0.5])
    y = np.array([1.0, 0.0, 2.0])
    m, c = mean_field_linear_reference(a, gamma, c0, v0, y, 1.0)
    gain = c0 @ a.T @ np.linalg.inv(a @ c0 @ a.T + gamma)
    np.testing.assert_allclose(c, c0 - gain @ a @ c0, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(m, v0 + gain @ (y - a @ v0), rtol=1e-10, atol=1e-12)


def test_reference_scalar_formula() -> None:
    """For a = Γ = C₀ = 1 and v₀ = 0: m = yt/(1 + t) and C = 1/(1 + t)."""
    for t in (0.5, 1.0, 10.0):
        m, c = mean_field_linear_reference([[1.0]], [[1.0]], [[1.0]], [0.0], [3.0], t)
        assert m[0] == pytest.approx(3.0 * t / (1.0 + t))
        assert c[0, 0] == pytest.approx(1.0 / (1.0 + t))


def test_reference_long_time_fits_data() -> None:
    """As t → ∞ the scalar mean tends to y/a."""
    m, c = mean_field_linear_reference([[2.0]], [[1.0]], [[1.0]], [0.0], [3.0], 1e12)
    assert m[0] == pytest.approx(1.5, rel=1e-9)
    assert c[0, 0] == pytest.approx(0.0, abs=1e-11)
