"""Tests for the experiments module."""

import itertools
import math
from pathlib import Path

import numpy as np
import pytest

from oneshot_eki.artifacts import METADATA_FILE, RunArtifacts
from oneshot_eki.config_schema import PRESETS, ExperimentConfig
from oneshot_eki.exceptions import ComparisonError, ConfigValidationError
from oneshot_eki.experiments import (
    ComparisonTable,
    compare_runs,
    default_run_directory,
    execute,
    reference_method,
    relative_distance,
    run_experiment,
    run_method,
    setup_experiment,
)
from oneshot_eki.nn import IdentitySurrogate, NetworkSurrogate
from oneshot_eki.oneshot import penalty_reference_solve


@pytest.fixture
def small_config() -> ExperimentConfig:
    """The linear experiment shrunk to eight nodes and a short horizon."""
    return PRESETS["oned_linear"].with_overrides(
        {
            "n_u": 8,
            "n_y": 3,
            "alpha1": 1.0,
            "ensemble_size": 10,
            "t_end": 1.0,
            "schedule_count": 2,
            "qn_max_iterations": 50,
        }
    )


def test_setup_one_dimensional(small_config: ExperimentConfig) -> None:
    """The linear setup has the configured sizes and observation points."""
    setup = setup_experiment(small_config)
    assert setup.grid is not None
    assert setup.mesh is None
    assert setup.model.n_u == 8
    assert setup.truth.shape == (8,)
    assert setup.data.y.shape == (3,)
    np.testing.assert_allclose(setup.obs.points, np.array([1.0, 2.0, 3.0]) * 0.0625 * math.pi)
    assert setup.reduced_problem().alpha1 == 1.0


def test_setup_is_reproducible(small_config: ExperimentConfig) -> None:
    """Equal seeds give equal data; the truth depends on truth_seed only."""
    first = setup_experiment(small_config)
    second = setup_experiment(small_config)
    np.testing.assert_array_equal(first.truth, second.truth)
    np.testing.assert_array_equal(first.data.y, second.data.y)

    reseeded = setup_experiment(small_config.with_overrides({"seed": 9}))
    np.testing.assert_array_equal(reseeded.truth, first.truth)
    assert not np.array_equal(reseeded.data.y, first.data.y)

    new_truth = setup_experiment(small_config.with_overrides({"truth_seed": 9}))
    assert not np.array_equal(new_truth.truth, first.truth)


def test_setup_two_dimensional() -> None:
    """The Poisson setup reads the reference mesh."""
    setup = setup_experiment(PRESETS["twod_poisson"])
    assert setup.mesh is not None
    assert setup.grid is None
    assert setup.model.n_u == 95
    assert setup.obs.n_y == PRESETS["twod_poisson"].n_y


def test_setup_rejects_mesh_size_mismatch() -> None:
    """n_u must equal the interior node count of the reference mesh."""
    config = PRESETS["twod_poisson"].with_overrides({"n_u": 94})
    with pytest.raises(ConfigValidationError):
        setup_experiment(config)


def test_surrogate_follows_method(small_config: ExperimentConfig) -> None:
    """nnos methods get a network, os methods the identity."""
    surrogate, variance = setup_experiment(small_config).surrogate()
    assert isinstance(surrogate, IdentitySurrogate)
    assert variance == small_config.state_init_variance

    network_config = small_config.with_overrides({"method": "nnosEKI_2", "hidden_layers": (3,)})
    surrogate, variance = setup_experiment(network_config).surrogate()
    assert isinstance(surrogate, NetworkSurrogate)
    assert variance == network_config.weight_init_variance


def test_reference_method() -> None:
    """Linear problems use the closed form, nonlinear ones BFGS."""
    assert reference_method(PRESETS["oned_linear"]) == "redTik"
    assert reference_method(PRESETS["oned_nonlinear"]) == "redQN"
    assert reference_method(PRESETS["twod_poisson"]) == "redTik"


def test_relative_distance() -> None:
    """Euclidean and zero-reference cases."""
    assert relative_distance(np.array([3.0, 4.0]), np.array([0.0, 5.0])) == pytest.approx(3.0 / 5.0)
    assert relative_distance(np.array([1.0]), np.array([0.0])) == math.inf


def test_reduced_quasi_newton_matches_tikhonov(small_config: ExperimentConfig) -> None:
    """On a linear problem BFGS lands on the closed-form estimate."""
    setup = setup_experiment(small_config)
    closed_form = run_method(setup, "redTik")
    bfgs = run_method(setup, "redQN")
    assert relative_distance(bfgs.estimate, closed_form.estimate) < 1e-3
    assert bfgs.flags["converged"]
    assert closed_form.extras["normal_residual"] < 1e-8


@pytest.mark.parametrize("method", ["redEKI", "osEKI_1", "osEKI_2", "osQN_1"])
def test_run_method_shapes(small_config: ExperimentConfig, method: str) -> None:
    """Every method returns a parameter estimate and a state of grid size."""
    setup = setup_experiment(small_config)
    result = run_method(setup, method)
    assert result.method == method
    assert result.estimate.shape == (8,)
    assert result.state.shape == (8,)
    assert np.isfinite(result.data_misfit)
    if method.startswith("os"):
        assert result.model_residual is not None
    else:
        assert result.model_residual is None
    assert result.trace


def test_run_method_unknown(small_config: ExperimentConfig) -> None:
    """Method names outside the registry are rejected."""
    with pytest.raises(ConfigValidationError):
        run_method(setup_experiment(small_config), "adam")


def test_penalty_minimizers_approach_tikhonov() -> None:
    """Along λ_k = k³ the exact penalty minimizers close in on the reduced Tikhonov estimate."""
    setup = setup_experiment(PRESETS["oned_linear"])
    system = setup.augmented_system()
    tikhonov = run_method(setup, "redTik").estimate

    distances = []
    residuals = []
    for k in range(1, 51):
        solution = penalty_reference_solve(system, float(k) ** 3)
        distances.append(relative_distance(solution.u, tikhonov))
        residuals.append(system.constraint_residual(system.join(solution.u, solution.theta)))

    assert all(later <= 1.1 * earlier for earlier, later in itertools.pairwise(distances))
    assert all(later <= earlier * (1.0 + 1e-8) for earlier, later in itertools.pairwise(residuals))
    assert distances[-1] <= 1e-3


def test_saturated_penalty_recovers_tikhonov() -> None:
    """At the penalty cap the one-shot minimizer is the reduced Tikhonov estimate."""
    setup = setup_experiment(PRESETS["oned_linear"])
    solution = penalty_reference_solve(setup.augmented_system(), 1e12)
    tikhonov = run_method(setup, "redTik").estimate
    assert relative_distance(solution.u, tikhonov) <= 1e-4


def test_execute_reuses_reference(small_config: ExperimentConfig) -> None:
    """Running the reference method itself does not run it twice."""
    outcome = execute(small_config.with_overrides({"method": "redTik"}))
    assert outcome.reference is outcome.result
    summary = outcome.summary()
    assert summary["distance_to_reference"] == 0.0
    assert summary["final_model_residual"] is None
    assert summary["reference_method"] == "redTik"


def test_execute_one_shot_summary(small_config: ExperimentConfig) -> None:
    """The continuous one-shot summary carries its flags and final λ."""
    summary = execute(small_config).summary()
    assert summary["method"] == "osEKI_2"
    assert summary["n_u"] == 8
    assert summary["n_y"] == 3
    assert isinstance(summary["saturated"], bool)
    assert summary["final_lambda"] == pytest.approx(math.sqrt(3.0), rel=1e-4)
    assert summary["final_model_residual"] >= 0.0


def test_run_experiment_writes_artifacts(tmp_path: Path, small_config: ExperimentConfig) -> None:
    """A finished run can be reopened and reproduces its configuration."""
    out_dir = default_run_directory(small_config, tmp_path)
    assert out_dir == tmp_path / "oned_linear" / "osEKI_2"

    run = run_experiment(small_config, out_dir)
    reopened = RunArtifacts.open(out_dir)
    assert reopened.config() == small_config
    assert run.summary()["method"] == "osEKI_2"
    for name in ("truth", "data", "estimate_u", "estimate_state", "reference_u", "observation_points"):
        assert reopened.path(f"{name}.txt").exists()
    assert reopened.vector("estimate_u").shape == (8,)
    assert "time" in reopened.trace()
    assert reopened.metadata()["wall_time_seconds"] > 0.0


def test_compare_runs(tmp_path: Path, small_config: ExperimentConfig) -> None:
    """Runs of one experiment are tabulated row by row."""
    runs = [
        run_experiment(small_config.with_overrides({"method": method}), tmp_path / method)
        for method in ("redTik", "osEKI_2")
    ]
    table = compare_runs(runs)
    assert isinstance(table, ComparisonTable)
    assert table.experiment == "oned_linear"
    assert [row["method"] for row in table.rows] == ["redTik", "osEKI_2"]

    lines = table.format().splitlines()
    assert lines[0].split() == [
        "method",
        "final_data_misfit",
        "final_model_residual",
        "distance_to_reference",
        "weighted_distance_to_reference",
        "wall_time_seconds",
    ]
    assert lines[1].split()[2] == "-"


def test_compare_runs_rejects_empty_and_mixed(tmp_path: Path) -> None:
    """No runs, or runs of different experiments, cannot be compared."""
    with pytest.raises(ComparisonError):
        compare_runs([])

    runs = []
    for experiment in ("oned_linear", "custom"):
        run = RunArtifacts.create(tmp_path / experiment)
        run.write_config(ExperimentConfig(experiment=experiment))
        run.write_summary({"experiment": experiment, "method": "redTik"})
        runs.append(run)
    with pytest.raises(ComparisonError, match="different experiments"):
        compare_runs(runs)


def test_rerun_writes_identical_artifacts(tmp_path: Path, small_config: ExperimentConfig) -> None:
    """Equal configurations and seeds give byte-identical files apart from the metadata."""
    first = run_experiment(small_config, tmp_path / "first")
    second = run_experiment(small_config, tmp_path / "second")

    names = sorted(p.name for p in first.directory.iterdir() if p.name != METADATA_FILE)
    assert names == sorted(p.name for p in second.directory.iterdir() if p.name != METADATA_FILE)
    assert "trace.txt" in names
    for name in names:
        assert first.path(name).read_bytes() == second.path(name).read_bytes(), name
