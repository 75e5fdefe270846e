"""Shared numeric primitives.

Weighted norms, Gaussian priors with spectral covariances, particle
ensembles and their empirical statistics. Vectors are 1-D numpy arrays;
stacks of vectors are 2-D arrays with one vector per row, except where a
docstring says the operator acts column-wise.
"""

from collections.abc import Sequence
from typing import NamedTuple, Protocol, runtime_checkable

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.distance import pdist

from oneshot_eki.exceptions import (
    DimensionMismatchError,
    EnsembleSizeError,
    InvalidPriorError,
    NotPositiveDefiniteError,
)

FloatArray = NDArray[np.float64]

SYMMETRY_RTOL = 1e-12
ORTHONORMALITY_TOL = 1e-10


@runtime_checkable
class CovarianceOperator(Protocol):
    """A symmetric positive definite operator with the factor actions EKI needs.

    Every method acts on the first axis, so a 2-D argument is treated as a
    stack of column vectors.
    """

    @property
    def dim(self) -> int:
        """Dimension n of the operator."""
        ...

    def solve(self, x: FloatArray) -> FloatArray:
        """Apply the inverse operator."""
        ...

    def whiten(self, x: FloatArray) -> FloatArray:
        """Apply a factor W with WᵀW equal to the inverse operator."""
        ...

    def sqrt_apply(self, z: FloatArray) -> FloatArray:
        """Apply a factor R with RRᵀ equal to the operator."""
        ...

    def dense(self) -> FloatArray:
        """Return the operator as a dense matrix."""
        ...


class WeightedMetric:
    """SPD matrix defining the weighted norm ‖x‖²_A = xᵀA⁻¹x.

    The matrix is factorized once with a lower Cholesky factor; it is never
    inverted explicitly.
    """

    def __init__(self, matrix: ArrayLike) -> None:
        """Validate and factorize an SPD matrix.

        Args:
            matrix: Square symmetric positive definite matrix.

        Raises:
            NotPositiveDefiniteError: If the matrix is not square, not
                symmetric to relative tolerance 1e-12, or the Cholesky
                factorization fails.
        """
        a = np.array(matrix, dtype=np.float64, ndmin=2)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:  # noqa: PLR2004
            raise NotPositiveDefiniteError(f"shape {a.shape} is not square")

        scale = float(np.max(np.abs(a))) if a.size else 0.0
        if not np.allclose(a, a.T, rtol=SYMMETRY_RTOL, atol=SYMMETRY_RTOL * scale):
            raise NotPositiveDefiniteError("matrix is not symmetric")

        self._matrix: FloatArray = 0.5 * (a + a.T)
        try:
            self._factor: FloatArray = scipy.linalg.cholesky(self._matrix, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("Cholesky factorization failed") from exc
        self._matrix.flags.writeable = False
        self._factor.flags.writeable = False

    @classmethod
    def identity(cls, dim: int, scale: float = 1.0) -> "WeightedMetric":
        """Return the metric of `scale` times the identity."""
        return cls(scale * np.eye(dim))

    @property
    def dim(self) -> int:
        """Dimension of the metric."""
        return self._matrix.shape[0]

    @property
    def factor(self) -> FloatArray:
        """Lower Cholesky factor L with LLᵀ = A."""
        return self._factor

    def solve(self, x: FloatArray) -> FloatArray:
        """Return A⁻¹x through the Cholesky factor."""
        return scipy.linalg.cho_solve((self._factor, True), self._check(x))

    def whiten(self, x: FloatArray) -> FloatArray:
        """Return L⁻¹x, so that ‖L⁻¹x‖² = xᵀA⁻¹x."""
        return scipy.linalg.solve_triangular(self._factor, self._check(x), lower=True)

    def sqrt_apply(self, z: FloatArray) -> FloatArray:
        """Return Lz; for standard normal z the result has covariance A."""
        return self._factor @ self._check(z)

    def dense(self) -> FloatArray:
        """Return a copy of A."""
        return self._matrix.copy()

    def _check(self, x: FloatArray) -> FloatArray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.dim:
            raise DimensionMismatchError("weighted metric argument", self.dim, x.shape[0])
        return x


def weighted_norm_sq(x: ArrayLike, metric: CovarianceOperator) -> float:
    """Return xᵀA⁻¹x for the SPD operator A.

    Args:
        x: Vector of length `metric.dim`.
        metric: The weighting operator.

    Returns:
        The squared weighted norm, computed as the squared Euclidean norm of
        the whitened vector.

    Raises:
        DimensionMismatchError: If the lengths differ.
    """
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    if vec.shape[0] != metric.dim:
        raise DimensionMismatchError("weighted norm argument", metric.dim, vec.shape[0])
    white = metric.whiten(vec)
    return float(white @ white)


class GaussianPrior:
    """Gaussian measure N(mean, C) with C = Σ_k λ_k e_k e_kᵀ.

    Eigenpairs are stored sorted by nonincreasing eigenvalue. The prior
    doubles as a `CovarianceOperator` for its covariance C.
    """

    def __init__(
        self,
        mean: ArrayLike,
        eigenvalues: ArrayLike,
        eigenvectors: ArrayLike,
        *,
        allow_degenerate: bool = False,
    ) -> None:
        """Validate and store the eigen-decomposition of the covariance.

        Args:
            mean: Prior mean u₀ of length n.
            eigenvalues: Covariance eigenvalues, length n.
            eigenvectors: Matrix whose columns are the orthonormal
                eigenvectors, shape n×n.
            allow_degenerate: Accept zero eigenvalues. Such priors can be
                sampled but not inverted.

        Raises:
            InvalidPriorError: On shape mismatch, non-orthonormal vectors or
                non-positive eigenvalues.
        """
        mu = np.array(mean, dtype=np.float64).reshape(-1)
        lam = np.array(eigenvalues, dtype=np.float64).reshape(-1)
        vecs = np.array(eigenvectors, dtype=np.float64, ndmin=2)
        n = mu.shape[0]
        if lam.shape[0] != n or vecs.shape != (n, n):
            raise InvalidPriorError(
                f"mean length {n}, {lam.shape[0]} eigenvalues, eigenvectors {vecs.shape}"
            )
        if not np.all(np.isfinite(lam)):
            raise InvalidPriorError("eigenvalues must be finite")
        if allow_degenerate:
            if np.any(lam < 0):
                raise InvalidPriorError("eigenvalues must be non-negative")
        elif np.any(lam <= 0):
            raise InvalidPriorError("eigenvalues must be strictly positive")
        gram_error = np.max(np.abs(vecs.T @ vecs - np.eye(n))) if n else 0.0
        if gram_error > ORTHONORMALITY_TOL:
            raise InvalidPriorError(f"eigenvectors not orthonormal (error {gram_error:.3g})")

        order = np.argsort(-lam, kind="stable")
        self._mean: FloatArray = mu
        self._eigenvalues: FloatArray = lam[order]
        self._eigenvectors: FloatArray = vecs[:, order]
        for arr in (self._mean, self._eigenvalues, self._eigenvectors):
            arr.flags.writeable = False
        self._degenerate = bool(np.any(self._eigenvalues == 0))

    @classmethod
    def dirichlet_sine_1d(
        cls,
        n: int,
        beta: float,
        nu: float,
        tau: float = 0.0,
        mean: ArrayLike | None = None,
    ) -> "GaussianPrior":
        """Prior β(τ − d²/dx²)^{−ν} on (0, π) with homogeneous Dirichlet data.

        Eigenvectors are the L²-orthonormal sine modes √(2/π) sin(kx) sampled
        at the n interior nodes x_j = jπ/(n+1) and scaled by √h, which makes
        them exactly Euclidean-orthonormal. Eigenvalues are β(τ + k²)^{−ν}.

        Args:
            n: Number of interior nodes.
            beta: Amplitude β > 0.
            nu: Smoothness exponent ν > 0.
            tau: Shift τ ≥ 0.
            mean: Prior mean, zero when omitted.

        Returns:
            The Gaussian prior on Rⁿ.
        """
        k = np.arange(1, n + 1, dtype=np.float64)
        j = np.arange(1, n + 1, dtype=np.float64)
        vecs = np.sqrt(2.0 / (n + 1)) * np.sin(np.outer(j, k) * np.pi / (n + 1))
        lam = beta * (tau + k**2) ** (-nu)
        mu = np.zeros(n) if mean is None else mean
        return cls(mu, lam, vecs)

    @classmethod
    def from_operator(
        cls,
        stiffness: ArrayLike,
        mass: ArrayLike,
        beta: float,
        nu: float,
        tau: float = 0.0,
        mean: ArrayLike | None = None,
    ) -> "GaussianPrior":
        """Prior β(τ·id − Δ)^{−ν} from discrete stiffness and mass matrices.

        Solves the generalized eigenproblem Kφ = μMφ through the Cholesky
        factor M = LLᵀ; the vectors w = Lᵀφ are Euclidean-orthonormal and
        carry the eigenvalues β(τ + μ)^{−ν}.

        Args:
            stiffness: Dense interior stiffness matrix K.
            mass: Dense interior consistent mass matrix M.
            beta: Amplitude β > 0.
            nu: Smoothness exponent ν > 0.
            tau: Shift τ ≥ 0.
            mean: Prior mean, zero when omitted.

        Returns:
            The Gaussian prior on Rⁿ.
        """
        k_mat = np.asarray(stiffness, dtype=np.float64)
        m_factor = WeightedMetric(mass).factor
        left = scipy.linalg.solve_triangular(m_factor, k_mat, lower=True)
        reduced = scipy.linalg.solve_triangular(m_factor, left.T, lower=True)
        mu_vals, vecs = scipy.linalg.eigh(0.5 * (reduced + reduced.T))
        lam = beta * (tau + mu_vals) ** (-nu)
        n = k_mat.shape[0]
        return cls(np.zeros(n) if mean is None else mean, lam, vecs)

    @property
    def dim(self) -> int:
        """Dimension n."""
        return self._mean.shape[0]

    @property
    def mean(self) -> FloatArray:
        """Prior mean u₀."""
        return self._mean

    @property
    def eigenvalues(self) -> FloatArray:
        """Eigenvalues, nonincreasing."""
        return self._eigenvalues

    @property
    def eigenvectors(self) -> FloatArray:
        """Orthonormal eigenvectors as columns."""
        return self._eigenvectors

    def with_mean(self, mean: ArrayLike) -> "GaussianPrior":
        """Return the same covariance centred at a new mean."""
        return GaussianPrior(
            mean,
            self._eigenvalues,
            self._eigenvectors,
            allow_degenerate=self._degenerate,
        )

    def solve(self, x: FloatArray) -> FloatArray:
        """Return C⁻¹x."""
        x = self._check(x)
        self._require_invertible()
        coeffs = self._eigenvectors.T @ x
        scale = 1.0 / self._eigenvalues
        return self._eigenvectors @ (coeffs * (scale if x.ndim == 1 else scale[:, None]))

    def whiten(self, x: FloatArray) -> FloatArray:
        """Return Λ^{−1/2}Eᵀx, whose squared norm is xᵀC⁻¹x."""
        x = self._check(x)
        self._require_invertible()
        scale = 1.0 / np.sqrt(self._eigenvalues)
        return (self._eigenvectors.T @ x) * (scale if x.ndim == 1 else scale[:, None])

    def sqrt_apply(self, z: FloatArray) -> FloatArray:
        """Return EΛ^{1/2}z."""
        z = self._check(z)
        scale = np.sqrt(self._eigenvalues)
        return self._eigenvectors @ (z * (scale if z.ndim == 1 else scale[:, None]))

    def dense(self) -> FloatArray:
        """Return C = EΛEᵀ."""
        return (self._eigenvectors * self._eigenvalues) @ self._eigenvectors.T

    def _check(self, x: FloatArray) -> FloatArray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.dim:
            raise DimensionMismatchError("prior argument", self.dim, x.shape[0])
        return x

    def _require_invertible(self) -> None:
        if self._degenerate:
            raise InvalidPriorError("degenerate prior has no inverse covariance")


def prior_sample(prior: GaussianPrior, count: int, rng: np.random.Generator) -> FloatArray:
    """Draw samples mean + Σ_k √λ_k ξ_k e_k.

    Args:
        prior: The Gaussian prior.
        count: Number of samples, at least 1.
        rng: Seeded generator; identical generators give identical samples.

    Returns:
        Array of shape (count, n), one sample per row.

    Raises:
        ValueError: If count < 1.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")  # noqa: TRY003
    xi = rng.standard_normal((prior.dim, count))
    return prior.mean + prior.sqrt_apply(xi).T


def gaussian_sample(
    mean: ArrayLike, covariance: CovarianceOperator, count: int, rng: np.random.Generator
) -> FloatArray:
    """Draw `count` rows from N(mean, covariance) through its square-root factor."""
    xi = rng.standard_normal((covariance.dim, count))
    return np.asarray(mean, dtype=np.float64) + covariance.sqrt_apply(xi).T


class EmpiricalStats(NamedTuple):
    """Ensemble statistics with 1/J normalization.

    Attributes:
        mean: Particle mean v̄.
        image_mean: Image mean Ḡ.
        cross_covariance: C^{v,y}, shape (n_v, n_G).
        image_covariance: C^{y,y}, shape (n_G, n_G).
    """

    mean: FloatArray
    image_mean: FloatArray
    cross_covariance: FloatArray
    image_covariance: FloatArray

    @property
    def image_cross_covariance(self) -> FloatArray:
        """C^{y,v}, the transpose of C^{v,y}."""
        return self.cross_covariance.T


class Ensemble:
    """J ≥ 2 particles of equal dimension stored as rows of a read-only array."""

    def __init__(self, particles: ArrayLike) -> None:
        """Copy and validate the particle array.

        Args:
            particles: Array of shape (J, n_v).

        Raises:
            EnsembleSizeError: If fewer than two particles are given.
            DimensionMismatchError: If the particles are not a 2-D stack.
        """
        arr = np.array(particles, dtype=np.float64)
        if arr.ndim != 2:  # noqa: PLR2004
            raise DimensionMismatchError("ensemble array rank", 2, arr.ndim)
        if arr.shape[0] < 2:  # noqa: PLR2004
            raise EnsembleSizeError(arr.shape[0])
        arr.flags.writeable = False
        self._particles: FloatArray = arr

    @property
    def particles(self) -> FloatArray:
        """Particles as a (J, n_v) read-only array."""
        return self._particles

    @property
    def size(self) -> int:
        """Number of particles J."""
        return self._particles.shape[0]

    @property
    def dim(self) -> int:
        """Particle dimension n_v."""
        return self._particles.shape[1]

    def mean(self) -> FloatArray:
        """Arithmetic mean of the particles."""
        return self._particles.sum(axis=0) / self.size

    def deviations(self) -> FloatArray:
        """Particles minus their mean, shape (J, n_v)."""
        return self._particles - self.mean()

    def covariance(self) -> FloatArray:
        """Empirical covariance with 1/J normalization, as used by the updates."""
        dev = self.deviations()
        return dev.T @ dev / self.size

    def sample_covariance(self) -> FloatArray:
        """Unbiased 1/(J−1) covariance, reported as a diagnostic only."""
        dev = self.deviations()
        return dev.T @ dev / (self.size - 1)

    def spread(self) -> float:
        """Largest Euclidean distance between two particles."""
        return float(np.max(pdist(self._particles)))

    def replace(self, particles: ArrayLike) -> "Ensemble":
        """Return a new ensemble of the same shape."""
        new = Ensemble(particles)
        if new.particles.shape != self._particles.shape:
            raise DimensionMismatchError("particle count", self.size, new.size)
        return new


def _canonical_order(particles: FloatArray) -> NDArray[np.intp]:
    """Lexicographic row order, so statistics do not depend on particle labels."""
    return np.lexsort(particles.T[::-1])


def empirical_stats(ens: Ensemble, images: ArrayLike) -> EmpiricalStats:
    """Compute v̄, Ḡ, C^{v,y} and C^{y,y} with 1/J normalization.

    Sums run over the particles in lexicographic order, which makes the
    result bit-identical under any relabelling of the particles.

    Args:
        ens: The ensemble.
        images: Forward images G(v⁽ʲ⁾), shape (J, n_G), in particle order.

    Returns:
        The empirical statistics.

    Raises:
        DimensionMismatchError: If the number of images differs from J.
    """
    img = np.asarray(images, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != ens.size:  # noqa: PLR2004
        raise DimensionMismatchError("number of forward images", ens.size, img.shape[0])
    order = _canonical_order(ens.particles)
    v = ens.particles[order]
    g = img[order]
    size = ens.size
    v_mean = v.sum(axis=0) / size
    g_mean = g.sum(axis=0) / size
    dv = v - v_mean
    dg = g - g_mean
    return EmpiricalStats(
        mean=v_mean,
        image_mean=g_mean,
        cross_covariance=dv.T @ dg / size,
        image_covariance=dg.T @ dg / size,
    )


def spawn_generators(seed: int, names: Sequence[str]) -> dict[str, np.random.Generator]:
    """Split one master seed into independent named generators.

    Args:
        seed: Master seed.
        names: Stream names; the order fixes which child stream each name gets.

    Returns:
        Mapping from name to generator.
    """
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children, strict=True)}
