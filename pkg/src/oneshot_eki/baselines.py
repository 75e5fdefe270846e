"""Reference solvers for the reduced and one-shot formulations.

* `tikhonov_reduced`: closed-form MAP estimate of the reduced linear problem.
* `bfgs_minimize`: BFGS with a Wolfe line search and central-difference
  gradients, used for the quasi-Newton variants.
* `quasi_newton_penalty`: penalty continuation with BFGS as the inner solver.
* `reduced_eki` and `reduced_quasi_newton`: EKI and BFGS applied to the
  reduced formulation u ↦ O(S(u)).
"""

import math
import warnings
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed
from numpy.typing import ArrayLike
from scipy.optimize import line_search

from oneshot_eki import logging_config
from oneshot_eki.core import (
    CovarianceOperator,
    Ensemble,
    FloatArray,
    GaussianPrior,
    prior_sample,
    weighted_norm_sq,
)
from oneshot_eki.eki import EkiRunReport, InverseProblemSpec, NoiseBlock
from oneshot_eki.exceptions import (
    ConfigValidationError,
    DimensionMismatchError,
    NonFiniteForwardError,
    NotPositiveDefiniteError,
    NumericalError,
    UnsupportedModelError,
)
from oneshot_eki.fem import ForwardModel, LinearForwardModel, ObservationOperator
from oneshot_eki.logging_context import run_context
from oneshot_eki.oneshot import (
    AugmentedSystem,
    DiscreteSchedule,
    EkiOptions,
    PenaltyPath,
    PenaltyStage,
)

logger = logging_config.get_logger(__name__)

ARMIJO_MAX_HALVINGS = 50
LINE_SEARCH_WARNING = "The line search algorithm"

Objective = Callable[[FloatArray], float]


class ReducedProblem:
    """Reduced formulation: the state is eliminated through S(u).

    The regularized objective is ½‖O(S(u)) − y‖²_Γobs + (α₁/2)‖u − u₀‖²_C.
    """

    def __init__(
        self,
        model: ForwardModel,
        obs: ObservationOperator,
        data: ArrayLike,
        prior: GaussianPrior,
        obs_noise: CovarianceOperator,
        alpha1: float,
    ) -> None:
        """Store the problem after checking dimensions."""
        self.model = model
        self.obs = obs
        self.data: FloatArray = np.asarray(data, dtype=np.float64).reshape(-1)
        self.prior = prior
        self.obs_noise = obs_noise
        self.alpha1 = float(alpha1)
        for what, expected, actual in (
            ("data", obs.n_y, self.data.shape[0]),
            ("prior", model.n_u, prior.dim),
            ("observed state", model.n_p, obs.n_p),
            ("observation noise", obs.n_y, obs_noise.dim),
        ):
            if expected != actual:
                raise DimensionMismatchError(what, expected, actual)
        if not (self.alpha1 >= 0 and math.isfinite(self.alpha1)):
            raise ConfigValidationError("alpha1", "Must be non-negative and finite")

    def predict(self, u: ArrayLike) -> FloatArray:
        """Return O(S(u))."""
        return self.obs.observe(self.model.solve(u))

    def data_misfit(self, u: ArrayLike) -> float:
        """Return ‖O(S(u)) − y‖²_Γobs."""
        return weighted_norm_sq(self.predict(u) - self.data, self.obs_noise)

    def objective(self, u: ArrayLike) -> float:
        """Regularized reduced objective.

        Raises:
            NonFiniteForwardError: If the value is NaN or infinite.
        """
        u_vec = np.asarray(u, dtype=np.float64).reshape(-1)
        value = 0.5 * self.data_misfit(u_vec)
        if self.alpha1 > 0:
            value += 0.5 * self.alpha1 * weighted_norm_sq(u_vec - self.prior.mean, self.prior)
        if not math.isfinite(value):
            raise NonFiniteForwardError
        return value

    def forward(self, u: ArrayLike) -> FloatArray:
        """EKI forward map G(u) = (O(S(u)); u), or O(S(u)) when α₁ = 0."""
        u_vec = np.asarray(u, dtype=np.float64).reshape(-1)
        observed = self.predict(u_vec)
        return np.concatenate([observed, u_vec]) if self.alpha1 > 0 else observed

    def inverse_problem(self) -> InverseProblemSpec:
        """Return (G, (y; u₀), diag(Γ_obs, α₁⁻¹C))."""
        blocks = [NoiseBlock("obs", self.obs_noise)]
        data = [self.data]
        if self.alpha1 > 0:
            blocks.append(NoiseBlock("parameter", self.prior, self.alpha1))
            data.append(self.prior.mean)
        return InverseProblemSpec(self.forward, np.concatenate(data), blocks)


class TikhonovSolution(NamedTuple):
    """Closed-form MAP estimate.

    Attributes:
        estimate: u*.
        objective: Regularized objective at u*.
        residual: Relative residual of the normal equations.
        state: S(u*).
    """

    estimate: FloatArray
    objective: float
    residual: float
    state: FloatArray


def tikhonov_reduced(
    model: ForwardModel,
    obs: ObservationOperator,
    y: ArrayLike,
    prior: GaussianPrior,
    alpha1: float,
    obs_noise: CovarianceOperator,
) -> TikhonovSolution:
    """Solve (AᵀΓ⁻¹A + α₁C⁻¹)u = AᵀΓ⁻¹y + α₁C⁻¹u₀ with A = O S.

    Args:
        model: A linear forward model.
        obs: Observation operator.
        y: Observations.
        prior: Gaussian prior with mean u₀ and covariance C.
        alpha1: Regularization weight.
        obs_noise: Observation noise covariance Γ_obs.

    Returns:
        The estimate together with its objective value and residual.

    Raises:
        UnsupportedModelError: If the model is not linear.
        NotPositiveDefiniteError: If the normal matrix is singular.
    """
    if not isinstance(model, LinearForwardModel):
        raise UnsupportedModelError("tikhonov_reduced")
    problem = ReducedProblem(model, obs, y, prior, obs_noise, alpha1)
    a_mat = obs.matrix @ model.solution_operator()
    weighted = obs_noise.solve(a_mat)
    normal = a_mat.T @ weighted
    rhs = weighted.T @ problem.data
    if problem.alpha1 > 0:
        normal = normal + problem.alpha1 * prior.solve(np.eye(prior.dim))
        rhs = rhs + problem.alpha1 * prior.solve(prior.mean)
    normal = 0.5 * (normal + normal.T)
    try:
        estimate = scipy.linalg.solve(normal, rhs, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("Tikhonov normal matrix") from exc
    residual = float(np.linalg.norm(normal @ estimate - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))
    return TikhonovSolution(estimate, problem.objective(estimate), residual, model.solve(estimate))


@dataclass(frozen=True, slots=True)
class BfgsConfig:
    """Settings of the BFGS solver.

    Attributes:
        max_iterations: Iteration limit.
        gradient_tol: Stop once ‖∇f‖ falls to this value.
        c1: Armijo constant of the Wolfe conditions.
        c2: Curvature constant of the Wolfe conditions.
        fd_step: Relative central-difference step; the step for x_i is
            fd_step·(1 + |x_i|).
        line_search_iterations: Iteration limit of the Wolfe search.
        workers: Threads for the gradient evaluations.
        warm_start: Start each penalty stage from the previous minimizer.
    """

    max_iterations: int = 200
    gradient_tol: float = 1e-6
    c1: float = 1e-4
    c2: float = 0.9
    fd_step: float = 1e-6
    line_search_iterations: int = 20
    workers: int = 1
    warm_start: bool = True

    def __post_init__(self) -> None:
        """Validate tolerances and Wolfe constants.

        Raises:
            ConfigValidationError: If a value is out of range.
        """
        if self.max_iterations < 0:
            raise ConfigValidationError("max_iterations", "Must not be negative")
        for name in ("gradient_tol", "fd_step"):
            if not getattr(self, name) > 0:
                raise ConfigValidationError(name, "Must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ConfigValidationError("c1, c2", "Wolfe constants need 0 < c1 < c2 < 1")
        if self.line_search_iterations < 1:
            raise ConfigValidationError("line_search_iterations", "Must be a positive integer")
        if self.workers < 1:
            raise ConfigValidationError("workers", "Must be a positive integer")


@dataclass
class BfgsTrace:
    """Per-iteration history of a BFGS run.

    Attributes:
        objective: f(x_k), starting with f(x₀).
        gradient_norm: ‖∇f(x_k)‖.
        step_length: Accepted α_k (0 for the starting point).
        hessian_asymmetry: max |H − Hᵀ| of the inverse-Hessian approximation.
        converged: The gradient tolerance was reached.
        warning: Set when the run stopped on a line-search failure.
        evaluations: Number of objective evaluations.
    """

    objective: list[float] = field(default_factory=list[float])
    gradient_norm: list[float] = field(default_factory=list[float])
    step_length: list[float] = field(default_factory=list[float])
    hessian_asymmetry: list[float] = field(default_factory=list[float])
    converged: bool = False
    warning: str | None = None
    evaluations: int = 0

    @property
    def iterations(self) -> int:
        """Number of accepted steps."""
        return max(0, len(self.objective) - 1)

    def append(self, value: float, grad_norm: float, step: float, asymmetry: float) -> None:
        """Record one iterate."""
        self.objective.append(value)
        self.gradient_norm.append(grad_norm)
        self.step_length.append(step)
        self.hessian_asymmetry.append(asymmetry)

    def columns(self) -> dict[str, FloatArray]:
        """Trace columns in display order."""
        return {
            "iteration": np.arange(len(self.objective), dtype=np.float64),
            "objective": np.asarray(self.objective),
            "gradient_norm": np.asarray(self.gradient_norm),
            "step": np.asarray(self.step_length),
        }


class BfgsResult(NamedTuple):
    """Minimizer, final objective value, inverse-Hessian estimate and trace."""

    x: FloatArray
    fun: float
    inverse_hessian: FloatArray
    trace: BfgsTrace


class _CountingObjective:
    """Wraps an objective, counts calls and rejects non-finite values."""

    def __init__(self, objective: Objective) -> None:
        self.objective = objective
        self.calls = 0

    def __call__(self, x: FloatArray) -> float:
        self.calls += 1
        value = float(self.objective(x))
        if not math.isfinite(value):
            raise NonFiniteForwardError
        return value


def finite_difference_gradient(
    objective: Objective, x: ArrayLike, rel_step: float = 1e-6, workers: int = 1
) -> FloatArray:
    """Central-difference gradient with step rel_step·(1 + |x_i|).

    Args:
        objective: Scalar function.
        x: Evaluation point.
        rel_step: Relative step.
        workers: Threads for the 2n evaluations.

    Returns:
        The gradient estimate.
    """
    x_vec = np.asarray(x, dtype=np.float64).reshape(-1)
    steps = rel_step * (1.0 + np.abs(x_vec))
    shifts = np.diag(steps)
    points = [x_vec + shift for shift in shifts] + [x_vec - shift for shift in shifts]
    if workers > 1:
        values = Parallel(n_jobs=workers, prefer="threads")(delayed(objective)(p) for p in points)
    else:
        values = [objective(p) for p in points]
    forward = np.asarray(values[: x_vec.shape[0]], dtype=np.float64)
    backward = np.asarray(values[x_vec.shape[0] :], dtype=np.float64)
    return (forward - backward) / (2.0 * steps)


def _armijo_backtrack(
    objective: Objective, x: FloatArray, direction: FloatArray, value: float, slope: float, c1: float
) -> float | None:
    alpha = 1.0
    for _ in range(ARMIJO_MAX_HALVINGS):
        if objective(x + alpha * direction) <= value + c1 * alpha * slope:
            return alpha
        alpha *= 0.5
    return None


def bfgs_minimize(objective: Objective, x0: ArrayLike, config: BfgsConfig | None = None) -> BfgsResult:
    """Minimize a smooth function with BFGS.

    The inverse-Hessian approximation starts at the identity and is updated
    only when the curvature condition sᵀy > 0 holds, then symmetrized.
    Steps come from scipy's Wolfe line search; when it fails an Armijo
    backtracking search is tried before giving up.

    Args:
        objective: Function to minimize, finite at x0.
        x0: Starting point.
        config: Solver settings.

    Returns:
        The best iterate with its trace. `trace.warning` is set when the
        run stopped because no acceptable step was found.

    Raises:
        NonFiniteForwardError: If the objective is not finite at x0.
    """
    cfg = config or BfgsConfig()
    fun = _CountingObjective(objective)
    x = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    n = x.shape[0]

    def gradient(point: FloatArray) -> FloatArray:
        return finite_difference_gradient(fun, point, cfg.fd_step, cfg.workers)

    value = fun(x)
    grad = gradient(x)
    h_inv = np.eye(n)
    trace = BfgsTrace()
    trace.append(value, float(np.linalg.norm(grad)), 0.0, 0.0)
    previous_value = value + float(np.linalg.norm(grad)) / 2

    for iteration in range(cfg.max_iterations):
        if trace.gradient_norm[-1] <= cfg.gradient_tol:
            break
        direction = -h_inv @ grad
        slope = float(grad @ direction)
        if slope >= 0:
            h_inv = np.eye(n)
            direction = -grad
            slope = -float(grad @ grad)
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message=LINE_SEARCH_WARNING, category=RuntimeWarning)
            alpha, _, _, new_value, _, new_grad = line_search(
                fun,
                gradient,
                x,
                direction,
                gfk=grad,
                old_fval=value,
                old_old_fval=previous_value,
                c1=cfg.c1,
                c2=cfg.c2,
                maxiter=cfg.line_search_iterations,
            )
        if alpha is None:
            alpha = _armijo_backtrack(fun, x, direction, value, slope, cfg.c1)
            if alpha is None:
                trace.warning = f"line search failed at iteration {iteration}"
                logger.warning("BFGS stopped: %s", trace.warning)
                break
            logger.debug("Wolfe search failed at iteration %d, Armijo step %.3e", iteration, alpha)
            new_value = fun(x + alpha * direction)
            new_grad = None
        step = alpha * direction
        x_new = x + step
        grad_new = gradient(x_new) if new_grad is None else np.asarray(new_grad, dtype=np.float64)
        curvature_change = grad_new - grad
        curvature = float(step @ curvature_change)
        if curvature > 0:
            rho = 1.0 / curvature
            left = np.eye(n) - rho * np.outer(step, curvature_change)
            h_inv = left @ h_inv @ left.T + rho * np.outer(step, step)
        asymmetry = float(np.max(np.abs(h_inv - h_inv.T)))
        h_inv = 0.5 * (h_inv + h_inv.T)
        previous_value = value
        x, value, grad = x_new, float(new_value), grad_new
        trace.append(value, float(np.linalg.norm(grad)), float(alpha), asymmetry)
        logger.debug(
            "iteration %d: f=%.10e |g|=%.3e alpha=%.3e", iteration + 1, value, trace.gradient_norm[-1], alpha
        )

    trace.converged = trace.gradient_norm[-1] <= cfg.gradient_tol
    trace.evaluations = fun.calls
    if not trace.converged and trace.warning is None:
        logger.info("BFGS reached the iteration limit with |g|=%.3e", trace.gradient_norm[-1])
    return BfgsResult(x, value, h_inv, trace)


def quasi_newton_penalty(
    system: AugmentedSystem,
    schedule: DiscreteSchedule,
    config: BfgsConfig | None = None,
    x0: ArrayLike | None = None,
) -> PenaltyPath:
    """Penalty continuation with BFGS minimizing each λ_k-loss.

    Args:
        system: The augmented system; its λ is replaced per stage.
        schedule: Strictly increasing penalty values.
        config: BFGS settings; `warm_start` chooses between restarting
            from the previous minimizer and from x0.
        x0: Starting point; (u₀, 0) when omitted.

    Returns:
        The path of stage minimizers. A numerical failure aborts the loop.
    """
    cfg = config or BfgsConfig()
    start = (
        system.join(system.prior.mean, np.zeros(system.n_theta))
        if x0 is None
        else np.asarray(x0, dtype=np.float64).reshape(-1)
    )
    path = PenaltyPath()
    parent = run_context.get()
    current = start
    for index, penalty in enumerate(schedule, start=1):
        token = run_context.set(f"{parent}/stage-{index}")
        try:
            stage_system = system.with_penalty(penalty)
            result = bfgs_minimize(stage_system.objective, current if cfg.warm_start else start, cfg)
            if result.trace.warning is not None:
                logger.warning("Stage %d: %s", index, result.trace.warning)
            stage = PenaltyStage(
                index=index,
                penalty=penalty,
                estimate=result.x,
                data_misfit=stage_system.data_misfit(result.x),
                model_residual=stage_system.constraint_residual(result.x),
                converged=result.trace.warning is None,
            )
            path.stages.append(stage)
            current = result.x
            logger.info(
                "lambda=%.4e misfit=%.6e residual=%.6e iterations=%d",
                penalty,
                stage.data_misfit,
                stage.model_residual,
                result.trace.iterations,
            )
        except NumericalError as exc:
            logger.error("Stage %d aborted: %s", index, exc)  # noqa: TRY400
            path.aborted = True
            path.error = str(exc)
            break
        finally:
            run_context.reset(token)
    return path


def reduced_eki(
    problem: ReducedProblem,
    size: int,
    rng: np.random.Generator,
    options: EkiOptions | None = None,
    initial: Ensemble | None = None,
) -> EkiRunReport:
    """Run EKI on the reduced formulation with particles drawn from the prior.

    Args:
        problem: The reduced problem.
        size: Number of particles J.
        rng: Ensemble generator.
        options: Integrator settings.
        initial: Explicit initial ensemble.

    Returns:
        The run report with a data-misfit diagnostic column.
    """
    opts = options or EkiOptions()
    ens0 = initial if initial is not None else Ensemble(prior_sample(problem.prior, size, rng))
    return opts.integrate(
        problem.inverse_problem(),
        ens0,
        diagnostics=lambda mean, _lam: {"data_misfit": problem.data_misfit(mean)},
    )


def reduced_quasi_newton(
    problem: ReducedProblem, config: BfgsConfig | None = None, x0: ArrayLike | None = None
) -> BfgsResult:
    """Minimize the reduced objective with BFGS, starting at u₀ by default."""
    start = problem.prior.mean if x0 is None else np.asarray(x0, dtype=np.float64)
    return bfgs_minimize(problem.objective, start, config)
