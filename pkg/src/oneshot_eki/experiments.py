"""Experiment runner: problem setup, method dispatch and run comparison.

`setup_experiment` turns an `ExperimentConfig` into the discretized
problem (grid or mesh, forward model, observation operator, prior, truth
and data). `execute` runs the configured method together with the
reference solution, and `run_experiment` writes the results to a run
directory. `compare_runs` tabulates finished runs of one experiment.
"""

import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from oneshot_eki import logging_config
from oneshot_eki.artifacts import RunArtifacts
from oneshot_eki.baselines import (
    BfgsConfig,
    ReducedProblem,
    quasi_newton_penalty,
    reduced_eki,
    reduced_quasi_newton,
    tikhonov_reduced,
)
from oneshot_eki.config_schema import ExperimentConfig
from oneshot_eki.core import (
    FloatArray,
    GaussianPrior,
    WeightedMetric,
    prior_sample,
    spawn_generators,
    weighted_norm_sq,
)
from oneshot_eki.exceptions import ComparisonError, ConfigValidationError, NumericalError
from oneshot_eki.fem import (
    ForwardModel,
    LinearForwardModel,
    NonlinearDiffusionModel1D,
    ObservationOperator,
    SyntheticData,
    assemble_p1_2d,
    synthesize_data,
)
from oneshot_eki.logging_context import run_context
from oneshot_eki.mesh import Grid1D, Mesh2D, load_reference_mesh, read_mesh, sample_observation_points
from oneshot_eki.nn import IdentitySurrogate, NetworkArchitecture, NetworkSurrogate, StateSurrogate
from oneshot_eki.oneshot import (
    AugmentedSystem,
    EkiOptions,
    algorithm1,
    algorithm2,
    initial_ensemble,
    make_continuous_schedule,
    make_discrete_schedule,
)

logger = logging_config.get_logger(__name__)

RNG_STREAMS = ("noise", "ensemble")


@dataclass
class ExperimentSetup:
    """Discretized problem of one experiment.

    Attributes:
        config: The configuration it was built from.
        model: Forward model.
        obs: Observation operator.
        prior: Gaussian prior on u.
        truth: The true parameter u†.
        data: Noisy observations and their noise-free reference.
        obs_noise: Γ_obs.
        model_noise: Unscaled Γ̂.
        grid: The 1D grid, when the model is one-dimensional.
        mesh: The 2D mesh, when the model is two-dimensional.
        ensemble_rng: Generator for initial and restart ensembles.
    """

    config: ExperimentConfig
    model: ForwardModel
    obs: ObservationOperator
    prior: GaussianPrior
    truth: FloatArray
    data: SyntheticData
    obs_noise: WeightedMetric
    model_noise: WeightedMetric
    ensemble_rng: np.random.Generator
    grid: Grid1D | None = None
    mesh: Mesh2D | None = None

    def reduced_problem(self) -> ReducedProblem:
        """The reduced formulation of this setup."""
        return ReducedProblem(
            self.model, self.obs, self.data.y, self.prior, self.obs_noise, self.config.alpha1
        )

    def surrogate(self) -> tuple[StateSurrogate, float]:
        """Return the state surrogate and the variance of its initial draws."""
        if self.config.uses_network:
            input_dim = 1 if self.grid is not None else 2
            arch = NetworkArchitecture.scalar_field(input_dim, self.config.hidden_layers)
            return NetworkSurrogate(arch, self.model.nodes), self.config.weight_init_variance
        return IdentitySurrogate(self.model.n_p), self.config.state_init_variance

    def augmented_system(self) -> AugmentedSystem:
        """The one-shot system for the configured method."""
        surrogate, _ = self.surrogate()
        return AugmentedSystem(
            self.model,
            self.obs,
            self.data.y,
            surrogate,
            self.prior,
            self.model_noise,
            self.obs_noise,
            self.config.alpha1,
            self.config.alpha2,
        )


def observation_points_1d(config: ExperimentConfig, grid: Grid1D) -> FloatArray:
    """Equispaced points x_i = i·obs_step·length for i = 1..n_y."""
    return np.arange(1, config.n_y + 1, dtype=np.float64) * config.obs_step * grid.length


def load_mesh(config: ExperimentConfig) -> Mesh2D:
    """The configured mesh file, or the shipped reference mesh."""
    return read_mesh(Path(config.mesh_file)) if config.mesh_file else load_reference_mesh()


def setup_experiment(config: ExperimentConfig) -> ExperimentSetup:
    """Build the discretized problem, truth and data for a configuration.

    The truth is drawn from the prior with `truth_seed`; the observation
    noise comes from the `noise` stream of `seed`, and 2D observation points
    from `obs_seed`.

    Raises:
        ConfigValidationError: If `n_u` disagrees with the mesh.
    """
    config.validate()
    streams = spawn_generators(config.seed, RNG_STREAMS)
    grid: Grid1D | None = None
    mesh: Mesh2D | None = None
    model: ForwardModel
    if config.is_one_dimensional:
        grid = Grid1D(config.n_u)
        obs = ObservationOperator.for_grid(grid, observation_points_1d(config, grid))
        prior = GaussianPrior.dirichlet_sine_1d(grid.n_interior, config.beta, config.nu, config.tau)
        if config.model == "reaction_diffusion_1d":
            model = LinearForwardModel.reaction_diffusion_1d(grid)
        else:
            model = NonlinearDiffusionModel1D(grid, config.source)
        logger.debug("Grid with %d interior nodes, h=%.6g", grid.n_interior, grid.h)
    else:
        mesh = load_mesh(config)
        if mesh.n_interior != config.n_u:
            raise ConfigValidationError("n_u", f"The mesh has {mesh.n_interior} interior nodes")
        points = sample_observation_points(config.n_y, np.random.default_rng(config.obs_seed))
        obs = ObservationOperator.for_mesh(mesh, points)
        stiffness, mass = assemble_p1_2d(mesh)
        prior = GaussianPrior.from_operator(
            stiffness.toarray(), mass.toarray(), config.beta, config.nu, config.tau
        )
        model = LinearForwardModel.poisson_2d(mesh)
        logger.debug("Mesh with %d interior and %d boundary nodes", mesh.n_interior, mesh.n_boundary)

    truth = prior_sample(prior, 1, np.random.default_rng(config.truth_seed))[0]
    obs_noise = WeightedMetric.identity(obs.n_y, config.obs_noise)
    data = synthesize_data(model, obs, truth, obs_noise, streams["noise"])
    logger.info(
        "Set up %s with %d parameters, %d states and %d observations",
        model.name,
        model.n_u,
        model.n_p,
        obs.n_y,
    )
    return ExperimentSetup(
        config=config,
        model=model,
        obs=obs,
        prior=prior,
        truth=truth,
        data=data,
        obs_noise=obs_noise,
        model_noise=WeightedMetric.identity(model.n_p, config.model_noise),
        ensemble_rng=streams["ensemble"],
        grid=grid,
        mesh=mesh,
    )


def eki_options(config: ExperimentConfig, workers: int = 1) -> EkiOptions:
    """Integrator settings from a configuration."""
    return EkiOptions(
        t_end=config.t_end,
        rtol=config.rtol,
        atol=config.atol,
        stagnation_tol=config.stagnation_tol,
        workers=workers,
    )


def bfgs_config(config: ExperimentConfig, workers: int = 1) -> BfgsConfig:
    """BFGS settings from a configuration."""
    return BfgsConfig(
        max_iterations=config.qn_max_iterations,
        gradient_tol=config.qn_gradient_tol,
        c1=config.qn_c1,
        c2=config.qn_c2,
        fd_step=config.qn_fd_step,
        workers=workers,
        warm_start=config.qn_warm_start,
    )


@dataclass
class MethodResult:
    """Outcome of one method.

    Attributes:
        method: Method name.
        estimate: Parameter estimate u.
        state: State estimate; S(u) for reduced methods, p_θ for one-shot ones.
        trace: Trace table columns, empty for closed-form solves.
        data_misfit: ‖O(p) − y‖²_Γobs at the estimate.
        model_residual: ‖M(u, p)‖² for one-shot methods, None otherwise.
        flags: Booleans such as `saturated` or `aborted`.
        extras: Further scalar results.
    """

    method: str
    estimate: FloatArray
    state: FloatArray
    trace: dict[str, FloatArray] = field(default_factory=dict[str, FloatArray])
    data_misfit: float = math.nan
    model_residual: float | None = None
    flags: dict[str, bool] = field(default_factory=dict[str, bool])
    extras: dict[str, float] = field(default_factory=dict[str, float])


def _reduced_result(setup: ExperimentSetup, method: str, estimate: FloatArray, **kwargs: Any) -> MethodResult:
    problem = setup.reduced_problem()
    return MethodResult(
        method=method,
        estimate=estimate,
        state=setup.model.solve(estimate),
        data_misfit=problem.data_misfit(estimate),
        **kwargs,
    )


def _one_shot_result(
    system: AugmentedSystem, method: str, v: FloatArray, **kwargs: Any
) -> MethodResult:
    u, _ = system.split(v)
    return MethodResult(
        method=method,
        estimate=u.copy(),
        state=system.state(v),
        data_misfit=system.data_misfit(v),
        model_residual=system.constraint_residual(v),
        **kwargs,
    )


def run_method(setup: ExperimentSetup, method: str | None = None, workers: int = 1) -> MethodResult:
    """Run one method on a prepared setup.

    Args:
        setup: The discretized problem.
        method: Method name; the configured one when None.
        workers: Threads for forward and objective evaluations.

    Returns:
        The method result.

    Raises:
        NumericalError: If a penalty method fails before completing a stage.
    """
    config = setup.config
    name = method or config.method
    options = eki_options(config, workers)
    qn_config = bfgs_config(config, workers)

    if name == "redTik":
        solution = tikhonov_reduced(
            setup.model, setup.obs, setup.data.y, setup.prior, config.alpha1, setup.obs_noise
        )
        return _reduced_result(setup, name, solution.estimate, extras={"normal_residual": solution.residual})
    if name == "redEKI":
        report = reduced_eki(setup.reduced_problem(), config.ensemble_size, setup.ensemble_rng, options)
        return _reduced_result(
            setup,
            name,
            report.final_mean,
            trace=report.columns(),
            flags={"stagnated": report.stagnated},
            extras={"evaluations": float(report.evaluations)},
        )
    if name == "redQN":
        result = reduced_quasi_newton(setup.reduced_problem(), qn_config)
        return _reduced_result(
            setup,
            name,
            result.x,
            trace=result.trace.columns(),
            flags={"converged": result.trace.converged, "line_search_failed": result.trace.warning is not None},
            extras={"iterations": float(result.trace.iterations)},
        )

    system = setup.augmented_system()
    _, surrogate_variance = setup.surrogate()
    if name.endswith("EKI_1"):
        schedule = make_discrete_schedule(config.discrete_schedule, config.schedule_count, config.schedule_power)
        path = algorithm1(
            system,
            schedule,
            config.ensemble_size,
            setup.ensemble_rng,
            options,
            surrogate_variance=surrogate_variance,
        )
        if not path.stages:
            raise NumericalError(path.error or "first penalty stage failed")
        return _one_shot_result(
            system, name, path.final_estimate, trace=path.columns(), flags={"aborted": path.aborted}
        )
    if name.endswith("EKI_2"):
        schedule = make_continuous_schedule(config.continuous_schedule, config.lambda0)
        ens0 = initial_ensemble(system, config.ensemble_size, setup.ensemble_rng, surrogate_variance)
        report = algorithm2(system, schedule, ens0, options, cap=config.penalty_cap)
        return _one_shot_result(
            system,
            name,
            report.final_mean,
            trace=report.columns(),
            flags={"saturated": report.saturated, "stagnated": report.stagnated},
            extras={
                "evaluations": float(report.evaluations),
                "final_lambda": float(report.penalty[-1]) if report.penalty is not None else math.nan,
            },
        )
    if name.endswith("QN_1"):
        schedule = make_discrete_schedule(config.discrete_schedule, config.schedule_count, config.schedule_power)
        path = quasi_newton_penalty(system, schedule, qn_config)
        if not path.stages:
            raise NumericalError(path.error or "first penalty stage failed")
        return _one_shot_result(
            system,
            name,
            path.final_estimate,
            trace=path.columns(),
            flags={"aborted": path.aborted, "converged": all(s.converged for s in path.stages)},
        )
    raise ConfigValidationError("method", f"Unknown method '{name}'")


def reference_method(config: ExperimentConfig) -> str:
    """redTik for linear models, redQN otherwise."""
    return "redTik" if config.is_linear else "redQN"


def relative_distance(estimate: FloatArray, reference: FloatArray, metric: GaussianPrior | None = None) -> float:
    """‖u − u_ref‖ / ‖u_ref‖, in the Cameron-Martin norm of `metric` when given."""
    if metric is None:
        num = float(np.linalg.norm(estimate - reference))
        den = float(np.linalg.norm(reference))
    else:
        num = math.sqrt(weighted_norm_sq(estimate - reference, metric))
        den = math.sqrt(weighted_norm_sq(reference, metric))
    return num / den if den > 0 else math.inf


@dataclass
class ExperimentResult:
    """A method result together with its reference solution."""

    setup: ExperimentSetup
    result: MethodResult
    reference: MethodResult

    def summary(self) -> dict[str, Any]:
        """Scalar results as plain Python values."""
        config = self.setup.config
        summary: dict[str, Any] = {
            "experiment": config.experiment,
            "method": self.result.method,
            "model": self.setup.model.name,
            "reference_method": self.reference.method,
            "n_u": self.setup.model.n_u,
            "n_y": self.setup.obs.n_y,
            "final_data_misfit": float(self.result.data_misfit),
            "final_model_residual": None
            if self.result.model_residual is None
            else float(self.result.model_residual),
            "distance_to_reference": relative_distance(self.result.estimate, self.reference.estimate),
            "weighted_distance_to_reference": relative_distance(
                self.result.estimate, self.reference.estimate, self.setup.prior
            ),
            "distance_to_truth": relative_distance(self.result.estimate, self.setup.truth),
        }
        summary.update({key: bool(value) for key, value in self.result.flags.items()})
        summary.update({key: float(value) for key, value in self.result.extras.items()})
        return summary


def execute(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Set up the problem, run the method and its reference.

    The reference runs after the method, so it cannot change the method's
    random streams.
    """
    setup = setup_experiment(config)
    result = run_method(setup, config.method, workers)
    ref_name = reference_method(config)
    reference = result if result.method == ref_name else run_method(setup, ref_name, workers)
    return ExperimentResult(setup, result, reference)


def default_run_directory(config: ExperimentConfig, output_dir: Path) -> Path:
    """`<output_dir>/<experiment>/<method>`."""
    return output_dir / config.experiment / config.method


def run_experiment(config: ExperimentConfig, out_dir: Path, workers: int = 1) -> RunArtifacts:
    """Run a configured experiment and write its artifact directory.

    Args:
        config: The experiment configuration.
        out_dir: Run directory to create or overwrite.
        workers: Threads for forward and objective evaluations.

    Returns:
        The written run directory.
    """
    token = run_context.set(f"{config.experiment}/{config.method}")
    try:
        started = datetime.now(timezone.utc)
        clock = time.perf_counter()
        outcome = execute(config, workers)
        wall_time = time.perf_counter() - clock

        artifacts = RunArtifacts.create(out_dir)
        artifacts.write_config(config)
        setup = outcome.setup
        artifacts.write_vectors(
            {
                "truth": setup.truth,
                "data": setup.data.y,
                "estimate_u": outcome.result.estimate,
                "estimate_state": outcome.result.state,
                "reference_u": outcome.reference.estimate,
                "observation_points": setup.obs.points,
            }
        )
        artifacts.write_trace(outcome.result.trace)
        artifacts.write_summary(outcome.summary())
        artifacts.write_metadata(wall_time, started)
        logger.info("Wrote run artifacts to %s in %.2fs", out_dir, wall_time)
        return artifacts
    finally:
        run_context.reset(token)


COMPARISON_COLUMNS = (
    "method",
    "final_data_misfit",
    "final_model_residual",
    "distance_to_reference",
    "weighted_distance_to_reference",
    "wall_time_seconds",
)


@dataclass
class ComparisonTable:
    """One row per run with the comparison columns."""

    experiment: str
    rows: list[dict[str, Any]]

    def format(self) -> str:
        """Render as an aligned plain-text table."""
        cells = [list(COMPARISON_COLUMNS)]
        for row in self.rows:
            cells.append([_format_cell(row.get(column)) for column in COMPARISON_COLUMNS])
        widths = [max(len(line[k]) for line in cells) for k in range(len(COMPARISON_COLUMNS))]
        return "\n".join("  ".join(text.ljust(width) for text, width in zip(line, widths, strict=True)).rstrip() for line in cells)


def _format_cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6e}"
    return str(value)


def compare_runs(runs: Sequence[RunArtifacts]) -> ComparisonTable:
    """Tabulate final misfit, residual, distances and wall time per run.

    Raises:
        ComparisonError: If no runs are given or they belong to different
            experiments.
    """
    if not runs:
        raise ComparisonError("no runs given")
    rows: list[dict[str, Any]] = []
    experiments: set[str] = set()
    for run in runs:
        summary = run.summary()
        experiments.add(str(summary.get("experiment")))
        row = {column: summary.get(column) for column in COMPARISON_COLUMNS}
        row["wall_time_seconds"] = run.metadata().get("wall_time_seconds")
        rows.append(row)
    if len(experiments) > 1:
        raise ComparisonError(f"runs belong to different experiments: {sorted(experiments)}")
    return ComparisonTable(experiments.pop(), rows)
