"""Ensemble Kalman inversion.

Implements the tempered discrete update

    v⁽ʲ⁾ ← v⁽ʲ⁾ + C^{v,y} (C^{y,y} + h⁻¹Γ)⁻¹ (y⁽ʲ⁾ − G(v⁽ʲ⁾))

and its deterministic continuous-time limit

    dv⁽ʲ⁾/dt = C^{v,y} Γ⁻¹ (ŷ − G(v⁽ʲ⁾)),

integrated with the Dormand-Prince 5(4) pair from scipy until a time cap or
until the ensemble stagnates. All covariances use the 1/J normalization.
"""

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed
from numpy.typing import ArrayLike
from scipy.integrate import RK45

from oneshot_eki import logging_config
from oneshot_eki.core import (
    CovarianceOperator,
    Ensemble,
    FloatArray,
    WeightedMetric,
    empirical_stats,
)
from oneshot_eki.exceptions import (
    DimensionMismatchError,
    IntegrationError,
    InvalidInputError,
    NonFiniteForwardError,
)

logger = logging_config.get_logger(__name__)

ForwardMap = Callable[[FloatArray], FloatArray]
Diagnostics = Callable[[FloatArray, float | None], Mapping[str, float]]
UpdateMode = Literal["perturbed", "unperturbed"]

DEFAULT_RTOL = 1e-6
DEFAULT_ATOL = 1e-9
DEFAULT_STAGNATION_TOL = 1e-12
CHECKPOINTS_PER_DECADE = 10
FIRST_CHECKPOINT = 1e-3


@dataclass(frozen=True, slots=True)
class NoiseBlock:
    """One diagonal block (1/weight)·covariance of the noise covariance Γ.

    A zero weight means the block carries no information: its precision is
    zero, so the continuous flow ignores it, but Γ itself is undefined and
    the discrete update rejects it.

    Attributes:
        name: Block label, for example "model" or "obs".
        covariance: The unscaled covariance operator.
        weight: Precision multiplier, non-negative.
    """

    name: str
    covariance: CovarianceOperator
    weight: float = 1.0

    def __post_init__(self) -> None:
        """Reject negative or non-finite weights."""
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise InvalidInputError(
                f"noise block '{self.name}' needs a non-negative finite weight, got {self.weight}"
            )

    @property
    def dim(self) -> int:
        """Block dimension."""
        return self.covariance.dim


class InverseProblemSpec:
    """Forward map G, data ŷ and block-diagonal noise covariance Γ."""

    def __init__(self, forward: ForwardMap, data: ArrayLike, blocks: Sequence[NoiseBlock]) -> None:
        """Store the problem.

        Raises:
            DimensionMismatchError: If the block dimensions do not add up to
                the data length.
        """
        self.forward = forward
        self.data: FloatArray = np.asarray(data, dtype=np.float64).reshape(-1)
        self.blocks: tuple[NoiseBlock, ...] = tuple(blocks)
        total = sum(block.dim for block in self.blocks)
        if total != self.data.shape[0]:
            raise DimensionMismatchError("noise covariance", self.data.shape[0], total)
        bounds = np.cumsum([0, *(block.dim for block in self.blocks)])
        self._slices = tuple(
            slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:], strict=True)
        )

    @property
    def n_g(self) -> int:
        """Dimension of the data space."""
        return self.data.shape[0]

    def block_slice(self, name: str) -> slice:
        """Rows belonging to the named block."""
        for block, rows in zip(self.blocks, self._slices, strict=True):
            if block.name == name:
                return rows
        raise KeyError(name)

    def with_weights(self, weights: Mapping[str, float]) -> "InverseProblemSpec":
        """Return a copy with the named block weights replaced."""
        blocks = [
            replace(block, weight=weights[block.name]) if block.name in weights else block
            for block in self.blocks
        ]
        return InverseProblemSpec(self.forward, self.data, blocks)

    def precision_apply(self, residual: FloatArray) -> FloatArray:
        """Return Γ⁻¹r for r of shape (n_G,) or (n_G, k)."""
        out = np.empty_like(residual, dtype=np.float64)
        for block, rows in zip(self.blocks, self._slices, strict=True):
            out[rows] = block.weight * block.covariance.solve(residual[rows])
        return out

    def whiten(self, residual: FloatArray) -> FloatArray:
        """Apply a block factor W with WᵀW = Γ⁻¹."""
        out = np.empty_like(residual, dtype=np.float64)
        for block, rows in zip(self.blocks, self._slices, strict=True):
            out[rows] = math.sqrt(block.weight) * block.covariance.whiten(residual[rows])
        return out

    def noise_sqrt_apply(self, z: FloatArray) -> FloatArray:
        """Apply a block factor R with RRᵀ = Γ."""
        self._require_finite_covariance()
        out = np.empty_like(z, dtype=np.float64)
        for block, rows in zip(self.blocks, self._slices, strict=True):
            out[rows] = block.covariance.sqrt_apply(z[rows]) / math.sqrt(block.weight)
        return out

    def dense_covariance(self) -> FloatArray:
        """Return Γ as a dense matrix."""
        self._require_finite_covariance()
        return scipy.linalg.block_diag(
            *(block.covariance.dense() / block.weight for block in self.blocks)
        )

    def _require_finite_covariance(self) -> None:
        for block in self.blocks:
            if block.weight == 0:
                raise InvalidInputError(f"noise block '{block.name}' has zero precision")

    def misfit(self, image: ArrayLike) -> float:
        """Return ‖G(v) − ŷ‖²_Γ for a given image G(v)."""
        white = self.whiten(np.asarray(image, dtype=np.float64) - self.data)
        return float(white @ white)

    def block_misfits(self, image: ArrayLike) -> dict[str, float]:
        """Unweighted per-block squared norms ‖(G(v) − ŷ)_b‖²_{cov_b}."""
        res = np.asarray(image, dtype=np.float64) - self.data
        out: dict[str, float] = {}
        for block, rows in zip(self.blocks, self._slices, strict=True):
            white = block.covariance.whiten(res[rows])
            out[block.name] = float(white @ white)
        return out


def evaluate_ensemble(forward: ForwardMap, particles: FloatArray, workers: int = 1) -> FloatArray:
    """Evaluate G on every particle.

    Args:
        forward: The forward map; must be reentrant when workers > 1.
        particles: Array of shape (J, n_v).
        workers: Number of threads used by joblib.

    Returns:
        Images of shape (J, n_G).

    Raises:
        NonFiniteForwardError: If some image contains NaN or infinity.
    """
    if workers > 1:
        images = Parallel(n_jobs=workers, prefer="threads")(
            delayed(forward)(particle) for particle in particles
        )
    else:
        images = [forward(particle) for particle in particles]
    stacked = np.asarray(np.vstack([np.asarray(img, dtype=np.float64).reshape(1, -1) for img in images]))
    finite = np.all(np.isfinite(stacked), axis=1)
    if not np.all(finite):
        raise NonFiniteForwardError(int(np.flatnonzero(~finite)[0]))
    return stacked


def eki_vector_field(
    spec: InverseProblemSpec,
    ens: Ensemble,
    images: FloatArray | None = None,
    workers: int = 1,
) -> FloatArray:
    """Return C^{v,y} Γ⁻¹ (ŷ − G(v⁽ʲ⁾)) for every particle.

    Args:
        spec: The inverse problem.
        ens: Current ensemble.
        images: Precomputed forward images, evaluated when omitted.
        workers: Threads for the forward evaluations.

    Returns:
        Time derivatives, shape (J, n_v).
    """
    imgs = evaluate_ensemble(spec.forward, ens.particles, workers) if images is None else images
    stats = empirical_stats(ens, imgs)
    weighted = spec.precision_apply((spec.data - imgs).T)
    return (stats.cross_covariance @ weighted).T


def eki_discrete_step(
    spec: InverseProblemSpec,
    ens: Ensemble,
    h: float,
    mode: UpdateMode = "unperturbed",
    rng: np.random.Generator | None = None,
    workers: int = 1,
) -> Ensemble:
    """Apply one tempered EKI update with step size h.

    Args:
        spec: The inverse problem.
        ens: Current ensemble.
        h: Step size, positive.
        mode: "perturbed" draws ξ⁽ʲ⁾ ~ N(0, h⁻¹Γ); "unperturbed" uses ξ = 0.
        rng: Generator for the perturbations; required in perturbed mode.
        workers: Threads for the forward evaluations.

    Returns:
        The updated ensemble.
    """
    if not h > 0:
        raise InvalidInputError(f"step size must be positive, got {h}")
    images = evaluate_ensemble(spec.forward, ens.particles, workers)
    stats = empirical_stats(ens, images)
    targets = np.broadcast_to(spec.data, images.shape).copy()
    if mode == "perturbed":
        if rng is None:
            raise InvalidInputError("perturbed updates need a random generator")
        z = rng.standard_normal((spec.n_g, ens.size))
        targets += spec.noise_sqrt_apply(z).T / math.sqrt(h)
    elif mode != "unperturbed":
        raise InvalidInputError(f"unknown update mode '{mode}'")
    system = stats.image_covariance + spec.dense_covariance() / h
    innovation = scipy.linalg.solve(system, (targets - images).T, assume_a="pos")
    return Ensemble(ens.particles + (stats.cross_covariance @ innovation).T)


@dataclass(frozen=True, slots=True)
class AuxiliaryFlow:
    """Scalar ODE dλ/dt = f(λ) integrated jointly with the particles.

    Attributes:
        initial: λ(0).
        rate: Right-hand side f.
        apply: Builds the inverse problem for the current λ.
        cap: λ stops growing once it reaches this value.
    """

    initial: float
    rate: Callable[[float], float]
    apply: Callable[[float], InverseProblemSpec]
    cap: float = math.inf

    def clamp(self, value: float) -> float:
        """Return λ limited to the cap."""
        return min(value, self.cap)

    def derivative(self, value: float) -> float:
        """Return f(λ) below the cap and 0 at or above it."""
        return 0.0 if value >= self.cap else self.rate(value)


@dataclass
class EkiRunReport:
    """Checkpointed trajectory of an EKI run.

    Attributes:
        times: Checkpoint times.
        means: Ensemble mean at each checkpoint, shape (K, n_v).
        misfit: ‖G(v̄) − ŷ‖²_Γ at each checkpoint.
        spread: Maximum pairwise particle distance at each checkpoint.
        final_ensemble: Ensemble at the last checkpoint.
        penalty: λ(t) when integrated jointly, otherwise None.
        diagnostics: Extra per-checkpoint columns.
        saturated: λ reached its cap.
        stagnated: The run stopped early on the stagnation test.
        evaluations: Number of right-hand side evaluations.
        particles: Optional particle snapshots, shape (K, J, n_v).
    """

    times: FloatArray
    means: FloatArray
    misfit: FloatArray
    spread: FloatArray
    final_ensemble: Ensemble
    penalty: FloatArray | None = None
    diagnostics: dict[str, FloatArray] = field(default_factory=dict[str, FloatArray])
    saturated: bool = False
    stagnated: bool = False
    evaluations: int = 0
    particles: FloatArray | None = None

    @property
    def final_mean(self) -> FloatArray:
        """Mean at the last checkpoint."""
        return self.means[-1]

    def columns(self) -> dict[str, FloatArray]:
        """Trace columns in display order."""
        cols: dict[str, FloatArray] = {"time": self.times}
        if self.penalty is not None:
            cols["lambda"] = self.penalty
        cols["misfit"] = self.misfit
        cols["spread"] = self.spread
        cols.update(self.diagnostics)
        return cols


def default_checkpoints(t_end: float) -> FloatArray:
    """Zero followed by log-spaced times from 1e-3 to t_end."""
    if t_end <= 0:
        return np.zeros(1)
    if t_end <= FIRST_CHECKPOINT:
        return np.array([0.0, t_end])
    decades = math.log10(t_end / FIRST_CHECKPOINT)
    count = max(2, math.ceil(decades * CHECKPOINTS_PER_DECADE) + 1)
    grid = np.logspace(math.log10(FIRST_CHECKPOINT), math.log10(t_end), count)
    grid[-1] = t_end
    return np.concatenate([[0.0], grid])


def _normalize_checkpoints(t_end: float, checkpoints: Iterable[float] | None) -> FloatArray:
    if checkpoints is None:
        return default_checkpoints(t_end)
    pts = np.asarray(sorted({float(t) for t in checkpoints if 0 < t < t_end}), dtype=np.float64)
    tail = [t_end] if t_end > 0 else []
    return np.concatenate([[0.0], pts, tail])


class _Recorder:
    """Collects checkpoint rows and applies the stagnation test."""

    def __init__(
        self,
        spec: InverseProblemSpec,
        auxiliary: AuxiliaryFlow | None,
        diagnostics: Diagnostics | None,
        stagnation_tol: float,
        *,
        keep_particles: bool,
    ) -> None:
        self.spec = spec
        self.auxiliary = auxiliary
        self.diagnostics = diagnostics
        self.stagnation_tol = stagnation_tol
        self.keep_particles = keep_particles
        self.times: list[float] = []
        self.means: list[FloatArray] = []
        self.misfit: list[float] = []
        self.spread: list[float] = []
        self.penalty: list[float] = []
        self.extra: dict[str, list[float]] = {}
        self.snapshots: list[FloatArray] = []

    def record(self, t: float, particles: FloatArray, lam: float | None) -> bool:
        """Store one checkpoint; return True when the ensemble has stagnated."""
        ens = Ensemble(particles)
        mean = ens.mean()
        spec = self.spec if self.auxiliary is None or lam is None else self.auxiliary.apply(lam)
        misfit = spec.misfit(evaluate_ensemble(spec.forward, mean[None, :])[0])
        spread = ens.spread()
        self.times.append(t)
        self.means.append(mean)
        self.misfit.append(misfit)
        self.spread.append(spread)
        if lam is not None:
            self.penalty.append(lam)
        if self.diagnostics is not None:
            for key, value in self.diagnostics(mean, lam).items():
                self.extra.setdefault(key, []).append(float(value))
        if self.keep_particles:
            self.snapshots.append(particles.copy())
        logger.debug(
            "t=%.4e misfit=%.6e spread=%.4e%s",
            t,
            misfit,
            spread,
            "" if lam is None else f" lambda={lam:.4e}",
            extra={"metrics": {"time": t, "misfit": misfit, "spread": spread, "lambda": lam}},
        )
        if len(self.times) < 2:  # noqa: PLR2004
            return False
        tol = self.stagnation_tol
        d_misfit = abs(self.misfit[-1] - self.misfit[-2])
        d_spread = abs(self.spread[-1] - self.spread[-2])
        return d_misfit <= tol * max(1.0, self.misfit[-2]) and d_spread <= tol * max(
            1.0, self.spread[-2]
        )

    def report(
        self, final: Ensemble, *, saturated: bool, stagnated: bool, evaluations: int
    ) -> EkiRunReport:
        return EkiRunReport(
            times=np.asarray(self.times),
            means=np.vstack(self.means),
            misfit=np.asarray(self.misfit),
            spread=np.asarray(self.spread),
            final_ensemble=final,
            penalty=np.asarray(self.penalty) if self.penalty else None,
            diagnostics={key: np.asarray(values) for key, values in self.extra.items()},
            saturated=saturated,
            stagnated=stagnated,
            evaluations=evaluations,
            particles=np.stack(self.snapshots) if self.keep_particles else None,
        )


def integrate_eki(
    spec: InverseProblemSpec,
    ens0: Ensemble,
    t_end: float,
    *,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    checkpoints: Iterable[float] | None = None,
    stagnation_tol: float = DEFAULT_STAGNATION_TOL,
    workers: int = 1,
    auxiliary: AuxiliaryFlow | None = None,
    diagnostics: Diagnostics | None = None,
    record_particles: bool = False,
) -> EkiRunReport:
    """Integrate the deterministic EKI flow with an adaptive RK45 solver.

    States between solver steps are obtained from the solver's dense output
    at the checkpoints. The run stops at t_end, or earlier when both the mean
    misfit and the spread change by at most `stagnation_tol` (relative to
    max(1, value)) between two checkpoints.

    Args:
        spec: The inverse problem; ignored for the forward map when
            `auxiliary` supplies λ-dependent problems.
        ens0: Initial ensemble.
        t_end: Final time, non-negative; 0 yields a report of the initial state.
        rtol: Relative tolerance of the integrator.
        atol: Absolute tolerance of the integrator.
        checkpoints: Recording times; log-spaced when omitted.
        stagnation_tol: Early-exit threshold.
        workers: Threads for the forward evaluations.
        auxiliary: Optional scalar penalty flow integrated jointly.
        diagnostics: Callback returning extra columns per checkpoint.
        record_particles: Keep every particle at every checkpoint.

    Returns:
        The run report.

    Raises:
        IntegrationError: If the solver fails, for example by step underflow.
    """
    if t_end < 0:
        raise InvalidInputError(f"t_end must be non-negative, got {t_end}")
    times = _normalize_checkpoints(t_end, checkpoints)
    n_particles, n_v = ens0.particles.shape
    lam0 = None if auxiliary is None else auxiliary.clamp(auxiliary.initial)
    recorder = _Recorder(
        spec, auxiliary, diagnostics, stagnation_tol, keep_particles=record_particles
    )
    recorder.record(0.0, ens0.particles, lam0)
    if times.shape[0] == 1:
        return recorder.report(ens0, saturated=False, stagnated=False, evaluations=0)

    size = n_particles * n_v

    def rhs(_t: float, state: FloatArray) -> FloatArray:
        particles = state[:size].reshape(n_particles, n_v)
        if auxiliary is None:
            current = spec
            d_aux: list[float] = []
        else:
            lam = auxiliary.clamp(float(state[size]))
            current = auxiliary.apply(lam)
            d_aux = [auxiliary.derivative(lam)]
        field_values = eki_vector_field(current, Ensemble(particles), workers=workers)
        return np.concatenate([field_values.reshape(-1), d_aux])

    y0 = np.concatenate([ens0.particles.reshape(-1), [] if lam0 is None else [lam0]])
    solver = RK45(rhs, 0.0, y0, t_end, rtol=rtol, atol=atol)
    next_index = 1
    stagnated = False
    last_state = y0
    while next_index < times.shape[0]:
        message = solver.step()
        if solver.status == "failed":
            raise IntegrationError(solver.t, str(message))
        if solver.t < times[next_index]:
            if solver.status != "running":
                raise IntegrationError(solver.t, "solver finished before the last checkpoint")
            continue
        dense = solver.dense_output()
        while next_index < times.shape[0] and times[next_index] <= solver.t:
            t_cp = float(times[next_index])
            last_state = solver.y if t_cp == solver.t else dense(t_cp)
            lam = None if auxiliary is None else auxiliary.clamp(float(last_state[size]))
            stagnated = recorder.record(t_cp, last_state[:size].reshape(n_particles, n_v), lam)
            next_index += 1
            if stagnated:
                logger.info("Ensemble stagnated at t=%.4e", t_cp)
                break
        if stagnated:
            break

    saturated = auxiliary is not None and recorder.penalty[-1] >= auxiliary.cap
    if saturated:
        logger.warning("Penalty parameter reached its cap %.3e", auxiliary.cap if auxiliary else 0.0)
    final = Ensemble(last_state[:size].reshape(n_particles, n_v))
    return recorder.report(
        final, saturated=saturated, stagnated=stagnated, evaluations=int(solver.nfev)
    )


def mean_field_linear_reference(
    A: ArrayLike,
    gamma: ArrayLike,
    c0: ArrayLike,
    v0: ArrayLike,
    y: ArrayLike,
    t: float,
) -> tuple[FloatArray, FloatArray]:
    """Closed-form mean and covariance of the linear mean-field EKI flow.

    C(t)⁻¹ = C₀⁻¹ + t AᵀΓ⁻¹A and m(t) = C(t)(t AᵀΓ⁻¹y + C₀⁻¹v₀).

    C(1) is the Gaussian posterior covariance. The deterministic particle
    flow of `integrate_eki` contracts its empirical covariance twice as
    fast: its C(t) equals this C(2t) exactly for linear G.

    Returns:
        Tuple (m(t), C(t)).
    """
    a_mat = np.atleast_2d(np.asarray(A, dtype=np.float64))
    gamma_metric = WeightedMetric(gamma)
    c0_metric = WeightedMetric(c0)
    v0_vec = np.asarray(v0, dtype=np.float64).reshape(-1)
    y_vec = np.asarray(y, dtype=np.float64).reshape(-1)
    precision = c0_metric.solve(np.eye(c0_metric.dim)) + t * a_mat.T @ gamma_metric.solve(a_mat)
    precision = 0.5 * (precision + precision.T)
    covariance = scipy.linalg.solve(precision, np.eye(precision.shape[0]), assume_a="pos")
    rhs = t * a_mat.T @ gamma_metric.solve(y_vec) + c0_metric.solve(v0_vec)
    return covariance @ rhs, 0.5 * (covariance + covariance.T)
