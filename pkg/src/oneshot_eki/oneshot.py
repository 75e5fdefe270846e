"""One-shot inversion through penalized ensemble Kalman inversion.

The unknown v = (u, θ) collects the PDE parameter u and the surrogate
parameters θ that produce the state p_θ. The augmented forward operator

    G(v) = (M(u, p_θ); O(p_θ); u; θ)

is matched against ŷ = (0; y; u₀; 0) under the block covariance

    Γ(λ) = diag(λ⁻¹Γ̂, Γ_obs, α₁⁻¹C, α₂⁻¹I),

so that ½‖G(v) − ŷ‖²_Γ(λ) is exactly the penalized loss. Blocks whose
weight α is zero are left out of G, ŷ and Γ. The penalty λ is either
stepped through a discrete schedule with a fresh EKI solve per value, or
integrated jointly with the particles as dλ/dt = f(λ).
"""

import copy
import math
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike

from oneshot_eki import logging_config
from oneshot_eki.core import (
    CovarianceOperator,
    Ensemble,
    FloatArray,
    GaussianPrior,
    WeightedMetric,
    prior_sample,
    weighted_norm_sq,
)
from oneshot_eki.eki import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    DEFAULT_STAGNATION_TOL,
    AuxiliaryFlow,
    EkiRunReport,
    InverseProblemSpec,
    NoiseBlock,
    integrate_eki,
)
from oneshot_eki.exceptions import (
    DimensionMismatchError,
    InvalidInputError,
    NonFiniteForwardError,
    NumericalError,
    ScheduleError,
    UnknownScheduleError,
    UnsupportedModelError,
)
from oneshot_eki.fem import ForwardModel, ObservationOperator
from oneshot_eki.logging_context import run_context
from oneshot_eki.nn import StateSurrogate

logger = logging_config.get_logger(__name__)

PENALTY_CAP = 1e12
DEFAULT_T_END = 1e10

MODEL_BLOCK = "model"
OBS_BLOCK = "obs"
PARAMETER_BLOCK = "parameter"
SURROGATE_BLOCK = "surrogate"


class LossTerms(NamedTuple):
    """The penalized loss split into its weighted terms.

    Attributes:
        data: ½‖O(p_θ) − y‖²_Γobs.
        model: (λ/2)‖M(u, p_θ)‖²_Γ̂.
        parameter: (α₁/2)‖u − u₀‖²_C.
        surrogate: (α₂/2)‖θ‖².
        total: Sum of the four terms.
    """

    data: float
    model: float
    parameter: float
    surrogate: float
    total: float


class AugmentedSystem:
    """Augmented forward operator, data and noise blocks for one-shot EKI."""

    def __init__(
        self,
        model: ForwardModel,
        obs: ObservationOperator,
        data: ArrayLike,
        surrogate: StateSurrogate,
        prior: GaussianPrior,
        model_noise: CovarianceOperator,
        obs_noise: CovarianceOperator,
        alpha1: float,
        alpha2: float = 0.0,
        penalty: float = 1.0,
    ) -> None:
        """Check the block dimensions and build the base inverse problem.

        Args:
            model: Forward model providing M(u, p).
            obs: Observation operator O.
            data: Observations y.
            surrogate: Map θ ↦ p_θ.
            prior: Gaussian prior on u; its mean is u₀.
            model_noise: Unscaled model-error covariance Γ̂.
            obs_noise: Observation noise covariance Γ_obs.
            alpha1: Weight of the parameter regularization, non-negative.
            alpha2: Weight of the surrogate regularization, non-negative.
            penalty: Current λ, non-negative.

        Raises:
            DimensionMismatchError: If any block size disagrees.
            InvalidInputError: If a weight is negative or not finite.
        """
        self.model = model
        self.obs = obs
        self.data: FloatArray = np.asarray(data, dtype=np.float64).reshape(-1)
        self.surrogate = surrogate
        self.prior = prior
        self.model_noise = model_noise
        self.obs_noise = obs_noise
        self.alpha1 = float(alpha1)
        self.alpha2 = float(alpha2)
        self._penalty = float(penalty)

        checks = (
            ("surrogate state", model.n_p, surrogate.n_p),
            ("observed state", model.n_p, obs.n_p),
            ("data", obs.n_y, self.data.shape[0]),
            ("prior", model.n_u, prior.dim),
            ("model noise", model.n_p, model_noise.dim),
            ("observation noise", obs.n_y, obs_noise.dim),
        )
        for what, expected, actual in checks:
            if expected != actual:
                raise DimensionMismatchError(what, expected, actual)
        for name, value in (("alpha1", self.alpha1), ("alpha2", self.alpha2), ("penalty", self._penalty)):
            if not (value >= 0 and math.isfinite(value)):
                raise InvalidInputError(f"{name} must be non-negative and finite, got {value}")

        blocks = [
            NoiseBlock(MODEL_BLOCK, model_noise, self._penalty),
            NoiseBlock(OBS_BLOCK, obs_noise),
        ]
        if self.has_parameter_block:
            blocks.append(NoiseBlock(PARAMETER_BLOCK, prior, self.alpha1))
        if self.has_surrogate_block:
            blocks.append(
                NoiseBlock(SURROGATE_BLOCK, WeightedMetric.identity(surrogate.n_params), self.alpha2)
            )
        self._spec = InverseProblemSpec(self.forward, self.data_vector(), blocks)

    @property
    def n_u(self) -> int:
        """Parameter dimension."""
        return self.model.n_u

    @property
    def n_theta(self) -> int:
        """Surrogate parameter dimension."""
        return self.surrogate.n_params

    @property
    def n_v(self) -> int:
        """Dimension of v = (u, θ)."""
        return self.n_u + self.n_theta

    @property
    def penalty(self) -> float:
        """Current λ."""
        return self._penalty

    @property
    def has_parameter_block(self) -> bool:
        """True when α₁ > 0 and u is observed."""
        return self.alpha1 > 0

    @property
    def has_surrogate_block(self) -> bool:
        """True when α₂ > 0 and θ is observed."""
        return self.alpha2 > 0

    @property
    def is_linear(self) -> bool:
        """True when G is affine in v."""
        return self.model.is_linear and self.surrogate.is_linear

    def with_penalty(self, penalty: float) -> "AugmentedSystem":
        """Return a copy with λ replaced."""
        if not (penalty >= 0 and math.isfinite(penalty)):
            raise InvalidInputError(f"penalty must be non-negative and finite, got {penalty}")
        clone = copy.copy(self)
        clone._penalty = float(penalty)  # noqa: SLF001
        clone._spec = self._spec.with_weights({MODEL_BLOCK: float(penalty)})  # noqa: SLF001
        return clone

    def inverse_problem(self, penalty: float | None = None) -> InverseProblemSpec:
        """Return (G, ŷ, Γ(λ)) for the current or the given λ."""
        if penalty is None:
            return self._spec
        return self._spec.with_weights({MODEL_BLOCK: float(penalty)})

    def split(self, v: ArrayLike) -> tuple[FloatArray, FloatArray]:
        """Split v into (u, θ)."""
        vec = np.asarray(v, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.n_v:
            raise DimensionMismatchError("augmented unknown", self.n_v, vec.shape[0])
        return vec[: self.n_u], vec[self.n_u :]

    def join(self, u: ArrayLike, theta: ArrayLike) -> FloatArray:
        """Stack (u, θ) into v."""
        return np.concatenate(
            [np.asarray(u, dtype=np.float64).reshape(-1), np.asarray(theta, dtype=np.float64).reshape(-1)]
        )

    def state(self, v: ArrayLike) -> FloatArray:
        """Return p_θ for the θ part of v."""
        return self.surrogate.state(self.split(v)[1])

    def forward(self, v: ArrayLike) -> FloatArray:
        """Evaluate G(v)."""
        u, theta = self.split(v)
        p = self.surrogate.state(theta)
        parts = [self.model.residual(u, p), self.obs.observe(p)]
        if self.has_parameter_block:
            parts.append(u)
        if self.has_surrogate_block:
            parts.append(theta)
        return np.concatenate(parts)

    def data_vector(self) -> FloatArray:
        """Return ŷ = (0; y; u₀; 0) with dropped blocks left out."""
        parts = [np.zeros(self.model.n_p), self.data]
        if self.has_parameter_block:
            parts.append(self.prior.mean)
        if self.has_surrogate_block:
            parts.append(np.zeros(self.n_theta))
        return np.concatenate(parts)

    def loss(self, u: ArrayLike, theta: ArrayLike) -> LossTerms:
        """Evaluate the penalized loss at (u, θ).

        Raises:
            NonFiniteForwardError: If any term is NaN or infinite.
        """
        u_vec = np.asarray(u, dtype=np.float64).reshape(-1)
        theta_vec = np.asarray(theta, dtype=np.float64).reshape(-1)
        p = self.surrogate.state(theta_vec)
        data = 0.5 * weighted_norm_sq(self.obs.observe(p) - self.data, self.obs_noise)
        model = 0.5 * self._penalty * weighted_norm_sq(self.model.residual(u_vec, p), self.model_noise)
        parameter = (
            0.5 * self.alpha1 * weighted_norm_sq(u_vec - self.prior.mean, self.prior)
            if self.has_parameter_block
            else 0.0
        )
        surrogate = 0.5 * self.alpha2 * float(theta_vec @ theta_vec)
        total = data + model + parameter + surrogate
        if not math.isfinite(total):
            raise NonFiniteForwardError
        return LossTerms(data, model, parameter, surrogate, total)

    def objective(self, v: ArrayLike) -> float:
        """Total loss at v, for the quasi-Newton solvers."""
        return self.loss(*self.split(v)).total

    def constraint_residual(self, v: ArrayLike) -> float:
        """Return the Euclidean ‖M(u, p_θ)‖²."""
        u, theta = self.split(v)
        res = self.model.residual(u, self.surrogate.state(theta))
        return float(res @ res)

    def data_misfit(self, v: ArrayLike) -> float:
        """Return ‖O(p_θ) − y‖²_Γobs."""
        return weighted_norm_sq(self.obs.observe(self.state(v)) - self.data, self.obs_noise)


# Schedules
@dataclass(frozen=True, slots=True)
class DiscreteSchedule:
    """Strictly increasing penalty values λ₁ < λ₂ < ... stepped by `algorithm1`."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        """Validate the sequence.

        Raises:
            ScheduleError: If the sequence is empty, non-positive or not
                strictly increasing.
        """
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ScheduleError("a discrete schedule needs at least one value")
        if not all(v > 0 and math.isfinite(v) for v in vals):
            raise ScheduleError(f"penalty values must be positive and finite, got {vals}")
        if any(b <= a for a, b in zip(vals[:-1], vals[1:], strict=True)):
            raise ScheduleError("penalty values must be strictly increasing")

    @classmethod
    def cubic(cls, count: int = 50, power: float = 3.0) -> "DiscreteSchedule":
        """λ_k = k^power for k = 1..count."""
        if count < 1:
            raise ScheduleError(f"count must be >= 1, got {count}")
        return cls(tuple(float(k) ** power for k in range(1, count + 1)))

    def __iter__(self) -> Iterator[float]:
        """Iterate over the penalty values."""
        return iter(self.values)

    def __len__(self) -> int:
        """Number of stages."""
        return len(self.values)


@dataclass(frozen=True, slots=True)
class ContinuousSchedule:
    """Penalty flow dλ/dt = f(λ) from λ(0) = initial.

    Attributes:
        name: Registry name.
        initial: λ₀, non-negative.
        rate: f, positive for every λ ≥ λ₀.
        closed_form: Exact λ(t), when known.
    """

    name: str
    initial: float
    rate: Callable[[float], float]
    closed_form: Callable[[float], float] | None = None

    def __post_init__(self) -> None:
        """Check λ₀ and f(λ₀).

        Raises:
            ScheduleError: If λ₀ < 0 or f(λ₀) is not positive.
        """
        if not (self.initial >= 0 and math.isfinite(self.initial)):
            raise ScheduleError(f"initial penalty must be non-negative, got {self.initial}")
        try:
            start = self.rate(self.initial)
        except ZeroDivisionError as exc:
            raise ScheduleError(f"rate is undefined at lambda={self.initial}") from exc
        if not start > 0:
            raise ScheduleError(f"rate must be positive, got f({self.initial}) = {start}")

    def value(self, t: float) -> float:
        """Return λ(t) from the closed form.

        Raises:
            ScheduleError: If the schedule has no closed form.
        """
        if self.closed_form is None:
            raise ScheduleError(f"schedule '{self.name}' has no closed form")
        return self.closed_form(t)


PenaltySchedule = DiscreteSchedule | ContinuousSchedule


def _constant_schedule(initial: float) -> ContinuousSchedule:
    return ContinuousSchedule("ode_const", initial, lambda _lam: 1.0, lambda t: initial + t)


def _inverse_schedule(initial: float) -> ContinuousSchedule:
    return ContinuousSchedule(
        "ode_inv", initial, lambda lam: 1.0 / lam, lambda t: math.sqrt(initial**2 + 2.0 * t)
    )


def _inverse_square_schedule(initial: float) -> ContinuousSchedule:
    return ContinuousSchedule(
        "ode_inv_sq", initial, lambda lam: 1.0 / lam**2, lambda t: (initial**3 + 3.0 * t) ** (1.0 / 3.0)
    )


SCHEDULE_DEFAULT_INITIAL: dict[str, float] = {"ode_const": 0.0, "ode_inv": 1.0, "ode_inv_sq": 1.0}

CONTINUOUS_SCHEDULES: dict[str, Callable[[float], ContinuousSchedule]] = {
    "ode_const": _constant_schedule,
    "ode_inv": _inverse_schedule,
    "ode_inv_sq": _inverse_square_schedule,
}

DISCRETE_SCHEDULES = ("cubic_k3",)

SCHEDULES: tuple[str, ...] = (*DISCRETE_SCHEDULES, *CONTINUOUS_SCHEDULES)


def make_schedule(
    name: str,
    *,
    count: int = 50,
    power: float = 3.0,
    initial: float | None = None,
) -> PenaltySchedule:
    """Build a registered schedule.

    Args:
        name: One of `SCHEDULES`.
        count: Number of stages of a discrete schedule.
        power: Exponent of the discrete schedule λ_k = k^power.
        initial: λ₀ of a continuous schedule; the registered default when None.

    Returns:
        The schedule.

    Raises:
        UnknownScheduleError: If the name is not registered.
    """
    if name in DISCRETE_SCHEDULES:
        return make_discrete_schedule(name, count, power)
    return make_continuous_schedule(name, initial)


def make_discrete_schedule(name: str, count: int = 50, power: float = 3.0) -> DiscreteSchedule:
    """Build a registered discrete schedule.

    Raises:
        UnknownScheduleError: If the name is not a registered discrete schedule.
    """
    if name not in DISCRETE_SCHEDULES:
        raise UnknownScheduleError(name, list(DISCRETE_SCHEDULES))
    return DiscreteSchedule.cubic(count, power)


def make_continuous_schedule(name: str, initial: float | None = None) -> ContinuousSchedule:
    """Build a registered penalty flow, with λ₀ defaulting per schedule.

    Raises:
        UnknownScheduleError: If the name is not a registered continuous schedule.
    """
    if name not in CONTINUOUS_SCHEDULES:
        raise UnknownScheduleError(name, list(CONTINUOUS_SCHEDULES))
    start = SCHEDULE_DEFAULT_INITIAL[name] if initial is None else float(initial)
    return CONTINUOUS_SCHEDULES[name](start)


# Algorithms
@dataclass(frozen=True, slots=True)
class EkiOptions:
    """Integrator settings shared by every EKI solve of a run."""

    t_end: float = DEFAULT_T_END
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    stagnation_tol: float = DEFAULT_STAGNATION_TOL
    checkpoints: tuple[float, ...] | None = None
    workers: int = 1

    def integrate(
        self,
        spec: InverseProblemSpec,
        ens0: Ensemble,
        **kwargs: object,
    ) -> EkiRunReport:
        """Run integrate_eki with these settings."""
        return integrate_eki(
            spec,
            ens0,
            self.t_end,
            rtol=self.rtol,
            atol=self.atol,
            checkpoints=self.checkpoints,
            stagnation_tol=self.stagnation_tol,
            workers=self.workers,
            **kwargs,  # type: ignore[arg-type]
        )


def initial_ensemble(
    system: AugmentedSystem,
    size: int,
    rng: np.random.Generator,
    surrogate_variance: float = 1.0,
) -> Ensemble:
    """Draw u⁽ʲ⁾ from the prior and θ⁽ʲ⁾ from N(0, surrogate_variance·I).

    Args:
        system: The augmented system.
        size: Number of particles J.
        rng: Ensemble generator.
        surrogate_variance: Variance of the initial surrogate parameters.

    Returns:
        The initial ensemble.
    """
    if surrogate_variance <= 0:
        raise InvalidInputError(f"surrogate variance must be positive, got {surrogate_variance}")
    u = prior_sample(system.prior, size, rng)
    theta = math.sqrt(surrogate_variance) * rng.standard_normal((size, system.n_theta))
    return Ensemble(np.hstack([u, theta]))


def _redraw(system: AugmentedSystem, center: FloatArray, size: int, rng: np.random.Generator) -> Ensemble:
    """Draw J particles from N(center, diag(C, I))."""
    u_center, theta_center = system.split(center)
    u = u_center + system.prior.sqrt_apply(rng.standard_normal((system.n_u, size))).T
    theta = theta_center + rng.standard_normal((size, system.n_theta))
    return Ensemble(np.hstack([u, theta]))


def _penalty_diagnostics(system: AugmentedSystem) -> Callable[[FloatArray, float | None], Mapping[str, float]]:
    def diagnostics(mean: FloatArray, _lam: float | None) -> Mapping[str, float]:
        return {
            "data_misfit": system.data_misfit(mean),
            "model_residual": system.constraint_residual(mean),
        }

    return diagnostics


@dataclass(frozen=True, slots=True)
class PenaltyStage:
    """Outcome of one stage of a penalty continuation.

    Attributes:
        index: Stage number, starting at 1.
        penalty: λ_k.
        estimate: v_k = (u_k, θ_k).
        data_misfit: ‖O(p_θk) − y‖²_Γobs.
        model_residual: ‖M(u_k, p_θk)‖².
        report: The inner EKI report, None for quasi-Newton stages.
        converged: False when the inner solver flagged a problem.
    """

    index: int
    penalty: float
    estimate: FloatArray
    data_misfit: float
    model_residual: float
    report: EkiRunReport | None = None
    converged: bool = True


@dataclass
class PenaltyPath:
    """Sequence of estimates produced by a penalty continuation."""

    stages: list[PenaltyStage] = field(default_factory=list[PenaltyStage])
    aborted: bool = False
    error: str | None = None

    @property
    def penalties(self) -> FloatArray:
        """λ_k per completed stage."""
        return np.asarray([s.penalty for s in self.stages])

    @property
    def estimates(self) -> FloatArray:
        """v_k per completed stage, shape (K, n_v)."""
        return np.vstack([s.estimate for s in self.stages])

    @property
    def final_estimate(self) -> FloatArray:
        """Estimate of the last completed stage.

        Raises:
            IndexError: If no stage completed.
        """
        return self.stages[-1].estimate

    def columns(self) -> dict[str, FloatArray]:
        """Trace columns in the EkiRunReport column format."""
        return {
            "lambda": self.penalties,
            "data_misfit": np.asarray([s.data_misfit for s in self.stages]),
            "model_residual": np.asarray([s.model_residual for s in self.stages]),
        }


def _stage(
    system: AugmentedSystem,
    index: int,
    estimate: FloatArray,
    report: EkiRunReport | None = None,
    *,
    converged: bool = True,
) -> PenaltyStage:
    return PenaltyStage(
        index=index,
        penalty=system.penalty,
        estimate=estimate,
        data_misfit=system.data_misfit(estimate),
        model_residual=system.constraint_residual(estimate),
        report=report,
        converged=converged,
    )


def algorithm1(
    system: AugmentedSystem,
    schedule: DiscreteSchedule,
    size: int,
    rng: np.random.Generator,
    options: EkiOptions | None = None,
    *,
    surrogate_variance: float = 1.0,
    initial: Ensemble | None = None,
) -> PenaltyPath:
    """Penalty EKI: one EKI solve per λ_k, each restarted around the last mean.

    The first stage starts from `initial`, or from the prior and
    N(0, surrogate_variance·I) when omitted. Stage k draws J particles from
    N(v_{k−1}, diag(C, I)) and integrates the flow for Γ(λ_k).

    Args:
        system: The augmented system; its λ is replaced per stage.
        schedule: Strictly increasing penalty values.
        size: Number of particles J.
        rng: Ensemble generator.
        options: Integrator settings.
        surrogate_variance: Variance of the first stage's θ draws.
        initial: Explicit first-stage ensemble.

    Returns:
        The path of stage estimates. A numerical failure aborts the loop and
        returns the stages completed so far with `aborted` set.
    """
    opts = options or EkiOptions()
    path = PenaltyPath()
    parent = run_context.get()
    ens = initial if initial is not None else initial_ensemble(system, size, rng, surrogate_variance)
    for index, penalty in enumerate(schedule, start=1):
        token = run_context.set(f"{parent}/stage-{index}")
        try:
            stage_system = system.with_penalty(penalty)
            if index > 1:
                ens = _redraw(stage_system, path.final_estimate, size, rng)
            report = opts.integrate(
                stage_system.inverse_problem(),
                ens,
                diagnostics=_penalty_diagnostics(stage_system),
            )
            stage = _stage(stage_system, index, report.final_mean, report)
            path.stages.append(stage)
            logger.info(
                "lambda=%.4e misfit=%.6e residual=%.6e",
                penalty,
                stage.data_misfit,
                stage.model_residual,
                extra={
                    "metrics": {
                        "stage": index,
                        "lambda": penalty,
                        "misfit": stage.data_misfit,
                        "residual": stage.model_residual,
                    }
                },
            )
        except NumericalError as exc:
            logger.error("Stage %d aborted: %s", index, exc)  # noqa: TRY400
            path.aborted = True
            path.error = str(exc)
            break
        finally:
            run_context.reset(token)
    return path


def algorithm2(
    system: AugmentedSystem,
    schedule: ContinuousSchedule,
    ens0: Ensemble,
    options: EkiOptions | None = None,
    *,
    cap: float = PENALTY_CAP,
    record_particles: bool = False,
) -> EkiRunReport:
    """Simultaneous penalty EKI: particles and λ integrated in one solve.

    Args:
        system: The augmented system; its own λ is ignored.
        schedule: The penalty flow.
        ens0: Initial ensemble.
        options: Integrator settings.
        cap: λ stops growing at this value and the report is marked saturated.
        record_particles: Keep all particles at every checkpoint.

    Returns:
        Report with λ(t), misfit, spread, data-misfit and model-residual traces.
    """
    opts = options or EkiOptions()
    base = system.inverse_problem()
    flow = AuxiliaryFlow(
        initial=schedule.initial,
        rate=schedule.rate,
        apply=lambda lam: base.with_weights({MODEL_BLOCK: lam}),
        cap=cap,
    )
    report = opts.integrate(
        base,
        ens0,
        auxiliary=flow,
        diagnostics=_penalty_diagnostics(system),
        record_particles=record_particles,
    )
    logger.info(
        "Finished at lambda=%.4e with residual %.6e",
        report.penalty[-1] if report.penalty is not None else float("nan"),
        report.diagnostics["model_residual"][-1],
    )
    return report


class PenaltySolution(NamedTuple):
    """Exact minimizer of the penalized loss for an affine augmented system.

    Attributes:
        u: Parameter estimate.
        theta: Surrogate parameters.
        state: p_θ.
        loss: Loss terms at the minimizer.
    """

    u: FloatArray
    theta: FloatArray
    state: FloatArray
    loss: LossTerms


def penalty_reference_solve(system: AugmentedSystem, penalty: float | None = None) -> PenaltySolution:
    """Minimize the penalized loss by whitened linear least squares.

    G is affine, so G(v) = Av + c with c = G(0) and columns of A obtained by
    evaluating G at the unit vectors. The minimizer solves
    min ‖W(Av + c − ŷ)‖² with WᵀW = Γ(λ)⁻¹.

    Args:
        system: The augmented system.
        penalty: λ; the system's current λ when None.

    Returns:
        The minimizer and its loss terms.

    Raises:
        UnsupportedModelError: If the model or the surrogate is nonlinear.
    """
    if not system.is_linear:
        raise UnsupportedModelError("penalty_reference_solve")
    target = system if penalty is None else system.with_penalty(penalty)
    spec = target.inverse_problem()
    offset = target.forward(np.zeros(target.n_v))
    jacobian = np.column_stack([target.forward(e) - offset for e in np.eye(target.n_v)])
    solution, *_ = scipy.linalg.lstsq(spec.whiten(jacobian), spec.whiten(spec.data - offset))
    u, theta = target.split(solution)
    return PenaltySolution(u, theta, target.surrogate.state(theta), target.loss(u, theta))
