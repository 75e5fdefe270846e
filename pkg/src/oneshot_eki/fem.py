"""Piecewise-linear finite-element forward models.

Three models share the `ForwardModel` protocol:

* 1D reaction-diffusion −p″ + p = u on (0, π),
* 1D nonlinear diffusion −(exp(u) p′)′ = 10 on (0, π),
* 2D Poisson −Δp = u on the unit square,

all with homogeneous Dirichlet conditions. States p and parameters u are
vectors of interior nodal values. The residual M(u, p) of a model is the
reduced interior system written as A p − b(u), so it vanishes exactly when
p = S(u).
"""

import threading
from collections.abc import Callable
from typing import NamedTuple, Protocol, runtime_checkable

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from numpy.typing import ArrayLike, NDArray

from oneshot_eki import logging_config
from oneshot_eki.core import CovarianceOperator, FloatArray
from oneshot_eki.exceptions import (
    CoefficientOverflowError,
    DimensionMismatchError,
    ObservationPointError,
    SingularSystemError,
)
from oneshot_eki.mesh import Grid1D, Mesh2D

logger = logging_config.get_logger(__name__)

EXP_LIMIT = 700.0
NODE_SNAP_TOL = 1e-10


@runtime_checkable
class ForwardModel(Protocol):
    """Residual map M(u, p) and solution operator S(u) on a fixed grid."""

    name: str

    @property
    def n_u(self) -> int:
        """Number of parameter degrees of freedom."""
        ...

    @property
    def n_p(self) -> int:
        """Number of state degrees of freedom (interior nodes)."""
        ...

    @property
    def nodes(self) -> FloatArray:
        """Interior node coordinates, shape (n_p,) in 1D or (n_p, d)."""
        ...

    @property
    def is_linear(self) -> bool:
        """True when M is jointly linear in (u, p)."""
        ...

    def solve(self, u: ArrayLike) -> FloatArray:
        """Return S(u)."""
        ...

    def residual(self, u: ArrayLike, p: ArrayLike) -> FloatArray:
        """Return M(u, p)."""
        ...


def _as_vector(x: ArrayLike, expected: int, what: str) -> FloatArray:
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    if vec.shape[0] != expected:
        raise DimensionMismatchError(what, expected, vec.shape[0])
    return vec


def assemble_p1_1d(
    grid: Grid1D, coefficient: ArrayLike | None = None
) -> tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """Assemble interior stiffness and consistent mass matrices on a 1D grid.

    Args:
        grid: The uniform grid.
        coefficient: Diffusion coefficient per element (n_interior + 1
            values); 1 when omitted.

    Returns:
        Tuple (K, M) of interior-interior blocks in CSR format.
    """
    n_elements = grid.n_interior + 1
    h = grid.h
    coeff = (
        np.ones(n_elements)
        if coefficient is None
        else _as_vector(coefficient, n_elements, "element coefficients")
    )
    left = np.arange(n_elements)
    right = left + 1
    rows = np.concatenate([left, left, right, right])
    cols = np.concatenate([left, right, left, right])
    k_vals = np.concatenate([coeff, -coeff, -coeff, coeff]) / h
    m_vals = np.concatenate(
        [np.full(n_elements, 2.0), np.ones(n_elements), np.ones(n_elements), np.full(n_elements, 2.0)]
    ) * (h / 6.0)
    shape = (n_elements + 1, n_elements + 1)
    stiffness = scipy.sparse.coo_matrix((k_vals, (rows, cols)), shape=shape).tocsr()
    mass = scipy.sparse.coo_matrix((m_vals, (rows, cols)), shape=shape).tocsr()
    interior = slice(1, n_elements)
    return stiffness[interior, interior], mass[interior, interior]


def assemble_p1_2d(mesh: Mesh2D) -> tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """Assemble interior stiffness and consistent mass matrices on a triangulation.

    Args:
        mesh: The triangulation.

    Returns:
        Tuple (K, M) of interior-interior blocks in CSR format.
    """
    corners = mesh.points[mesh.triangles]
    areas = mesh.areas()
    # Gradients of the barycentric coordinates, one (3, 2) block per triangle.
    x, y = corners[:, :, 0], corners[:, :, 1]
    grads = np.stack(
        [
            np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1),
            np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1),
        ],
        axis=2,
    ) / (2.0 * areas)[:, None, None]
    local_k = areas[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    local_m = areas[:, None, None] * (np.ones((3, 3)) + np.eye(3)) / 12.0

    rows = np.repeat(mesh.triangles, 3, axis=1).reshape(-1)
    cols = np.tile(mesh.triangles, (1, 3)).reshape(-1)
    shape = (mesh.n_nodes, mesh.n_nodes)
    stiffness = scipy.sparse.coo_matrix((local_k.reshape(-1), (rows, cols)), shape=shape).tocsr()
    mass = scipy.sparse.coo_matrix((local_m.reshape(-1), (rows, cols)), shape=shape).tocsr()
    interior = mesh.interior_index
    return stiffness[interior][:, interior], mass[interior][:, interior]


class LinearForwardModel:
    """Linear model A p = B u with a cached sparse LU factorization of A.

    The factorization is computed once; solves are serialized by a lock so
    the model can be shared by the particle evaluation threads.
    """

    def __init__(
        self,
        system: scipy.sparse.spmatrix,
        load: scipy.sparse.spmatrix,
        nodes: ArrayLike,
        name: str = "linear",
    ) -> None:
        """Factorize the system matrix.

        Args:
            system: Square SPD system matrix A, shape (n_p, n_p).
            load: Load operator B, shape (n_p, n_u).
            nodes: Interior node coordinates.
            name: Label used in logs.

        Raises:
            SingularSystemError: If A cannot be factorized.
            DimensionMismatchError: If the shapes of A and B disagree.
        """
        self._system = scipy.sparse.csc_matrix(system, dtype=np.float64)
        self._load = scipy.sparse.csr_matrix(load, dtype=np.float64)
        if self._system.shape[0] != self._system.shape[1]:
            raise DimensionMismatchError("system matrix columns", *self._system.shape)
        if self._load.shape[0] != self._system.shape[0]:
            raise DimensionMismatchError("load operator rows", self._system.shape[0], self._load.shape[0])
        self._nodes = np.asarray(nodes, dtype=np.float64)
        self.name = name
        try:
            self._lu = scipy.sparse.linalg.splu(self._system)
        except RuntimeError as exc:
            raise SingularSystemError(name) from exc
        self._lock = threading.Lock()

    @classmethod
    def reaction_diffusion_1d(cls, grid: Grid1D) -> "LinearForwardModel":
        """Model −p″ + p = u: A = K + M and B = M (consistent mass)."""
        stiffness, mass = assemble_p1_1d(grid)
        return cls(stiffness + mass, mass, grid.nodes, name="reaction_diffusion_1d")

    @classmethod
    def poisson_2d(cls, mesh: Mesh2D) -> "LinearForwardModel":
        """Model −Δp = u: A = K and B = M on the interior nodes."""
        stiffness, mass = assemble_p1_2d(mesh)
        return cls(stiffness, mass, mesh.interior_points, name="poisson_2d")

    @property
    def n_u(self) -> int:
        """Number of parameter degrees of freedom."""
        return self._load.shape[1]

    @property
    def n_p(self) -> int:
        """Number of state degrees of freedom."""
        return self._system.shape[0]

    @property
    def nodes(self) -> FloatArray:
        """Interior node coordinates."""
        return self._nodes

    @property
    def is_linear(self) -> bool:
        """Always True."""
        return True

    @property
    def system_matrix(self) -> scipy.sparse.csc_matrix:
        """System matrix A."""
        return self._system

    @property
    def load_matrix(self) -> scipy.sparse.csr_matrix:
        """Load operator B."""
        return self._load

    def solve(self, u: ArrayLike) -> FloatArray:
        """Return p = A⁻¹Bu."""
        rhs = self._load @ _as_vector(u, self.n_u, "parameter u")
        with self._lock:
            return self._lu.solve(rhs)

    def residual(self, u: ArrayLike, p: ArrayLike) -> FloatArray:
        """Return A p − B u."""
        u_vec = _as_vector(u, self.n_u, "parameter u")
        p_vec = _as_vector(p, self.n_p, "state p")
        return self._system @ p_vec - self._load @ u_vec

    def solution_operator(self) -> FloatArray:
        """Dense S = A⁻¹B."""
        with self._lock:
            return self._lu.solve(self._load.toarray())


class NonlinearDiffusionModel1D:
    """Model −(exp(u) p′)′ = f on (0, π) with p = 0 on the boundary.

    The coefficient on each element is exp of the average of u at its two
    end nodes. Boundary values of u, which are not unknowns, repeat the
    nearest interior value.
    """

    name = "nonlinear_diffusion_1d"

    def __init__(self, grid: Grid1D, source: float = 10.0) -> None:
        """Store the grid and the constant source term.

        Args:
            grid: The uniform grid.
            source: Constant right-hand side f.
        """
        self._grid = grid
        self._source = source
        self._load: FloatArray = np.full(grid.n_interior, source * grid.h)

    @property
    def n_u(self) -> int:
        """Number of parameter degrees of freedom."""
        return self._grid.n_interior

    @property
    def n_p(self) -> int:
        """Number of state degrees of freedom."""
        return self._grid.n_interior

    @property
    def nodes(self) -> FloatArray:
        """Interior node coordinates."""
        return self._grid.nodes

    @property
    def is_linear(self) -> bool:
        """Always False."""
        return False

    @property
    def grid(self) -> Grid1D:
        """The underlying grid."""
        return self._grid

    def element_coefficients(self, u: ArrayLike) -> FloatArray:
        """Return exp(u) at the element midpoints.

        Raises:
            CoefficientOverflowError: If some |u| exceeds 700 or is not finite.
        """
        u_vec = _as_vector(u, self.n_u, "parameter u")
        max_abs = float(np.max(np.abs(u_vec)))
        if not np.isfinite(max_abs) or max_abs > EXP_LIMIT:
            raise CoefficientOverflowError(max_abs)
        extended = np.concatenate([u_vec[:1], u_vec, u_vec[-1:]])
        return np.exp(0.5 * (extended[:-1] + extended[1:]))

    def system(self, u: ArrayLike) -> scipy.sparse.csr_matrix:
        """Assemble the stiffness matrix for the coefficient exp(u)."""
        stiffness, _ = assemble_p1_1d(self._grid, self.element_coefficients(u))
        return stiffness

    def solve(self, u: ArrayLike) -> FloatArray:
        """Return the state solving the linear-in-p problem for coefficient exp(u)."""
        matrix = self.system(u).tocsc()
        try:
            return scipy.sparse.linalg.splu(matrix).solve(self._load)
        except RuntimeError as exc:
            raise SingularSystemError(self.name) from exc

    def residual(self, u: ArrayLike, p: ArrayLike) -> FloatArray:
        """Return A(u) p − f."""
        p_vec = _as_vector(p, self.n_p, "state p")
        return self.system(u) @ p_vec - self._load


class ObservationOperator:
    """Piecewise-linear interpolation of nodal states at observation points.

    The interpolation matrix spans all nodes, boundary included, so each row
    sums to one; `observe` uses the interior columns because Dirichlet nodal
    values are zero.
    """

    def __init__(
        self, matrix: ArrayLike, interior_index: ArrayLike, points: ArrayLike | None = None
    ) -> None:
        """Store the full interpolation matrix.

        Args:
            matrix: Interpolation weights, shape (n_y, n_nodes).
            interior_index: Columns belonging to interior nodes.
            points: Observation point coordinates, kept for reporting.
        """
        self._matrix: FloatArray = np.asarray(matrix, dtype=np.float64)
        self._interior = np.asarray(interior_index, dtype=np.int64)
        self._interior_matrix: FloatArray = np.ascontiguousarray(self._matrix[:, self._interior])
        self.points = None if points is None else np.asarray(points, dtype=np.float64)

    @classmethod
    def for_grid(cls, grid: Grid1D, points: ArrayLike) -> "ObservationOperator":
        """Linear interpolation on a 1D grid.

        Raises:
            ObservationPointError: If a point is outside [0, length].
        """
        xs = np.asarray(points, dtype=np.float64).reshape(-1)
        n_nodes = grid.n_interior + 2
        matrix = np.zeros((xs.shape[0], n_nodes))
        for row, x in enumerate(xs):
            if not 0.0 <= x <= grid.length:
                raise ObservationPointError((float(x),))
            position = x / grid.h
            nearest = int(np.rint(position))
            if abs(position - nearest) <= NODE_SNAP_TOL:
                matrix[row, nearest] = 1.0
                continue
            k = int(np.floor(position))
            t = position - k
            matrix[row, k] = 1.0 - t
            matrix[row, k + 1] = t
        return cls(matrix, np.arange(1, n_nodes - 1), xs)

    @classmethod
    def for_mesh(cls, mesh: Mesh2D, points: ArrayLike) -> "ObservationOperator":
        """Barycentric interpolation on a triangulation.

        Raises:
            ObservationPointError: If a point is outside the mesh.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        matrix = np.zeros((pts.shape[0], mesh.n_nodes))
        for row, point in enumerate(pts):
            tri, weights = mesh.locate(point)
            matrix[row, mesh.triangles[tri]] += weights
        return cls(matrix, mesh.interior_index, pts)

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "ObservationOperator":
        """Wrap an explicit observation matrix acting on all state components."""
        arr = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        return cls(arr, np.arange(arr.shape[1]))

    @property
    def n_y(self) -> int:
        """Number of observations."""
        return self._matrix.shape[0]

    @property
    def n_p(self) -> int:
        """Length of the observed state vector."""
        return self._interior.shape[0]

    @property
    def full_matrix(self) -> FloatArray:
        """Interpolation weights over all nodes."""
        return self._matrix

    @property
    def matrix(self) -> FloatArray:
        """Interpolation weights restricted to the interior state, shape (n_y, n_p)."""
        return self._interior_matrix

    def observe(self, p: ArrayLike) -> FloatArray:
        """Return O p."""
        return self._interior_matrix @ _as_vector(p, self.n_p, "observed state")


class SyntheticData(NamedTuple):
    """Synthetic observations.

    Attributes:
        y: Noisy data O(S(u†)) + η.
        clean: Noise-free observations O(S(u†)).
        state: The true state S(u†).
    """

    y: FloatArray
    clean: FloatArray
    state: FloatArray


def synthesize_data(
    model: ForwardModel,
    obs: ObservationOperator,
    truth: ArrayLike,
    noise: CovarianceOperator | None,
    rng: np.random.Generator,
) -> SyntheticData:
    """Generate y = O(S(u†)) + η with η ~ N(0, Γ_obs).

    Args:
        model: Forward model.
        obs: Observation operator.
        truth: True parameter u†.
        noise: Observation noise covariance; None for noise-free data.
        rng: Seeded generator for η.

    Returns:
        The noisy data and its noise-free reference.
    """
    state = model.solve(truth)
    clean = obs.observe(state)
    if noise is None:
        return SyntheticData(clean.copy(), clean, state)
    eta = noise.sqrt_apply(rng.standard_normal(noise.dim))
    return SyntheticData(clean + eta, clean, state)


def l2_error_1d(
    grid: Grid1D, p: ArrayLike, exact: Callable[[FloatArray], FloatArray], order: int = 4
) -> float:
    """L² distance between a P1 function with zero boundary values and `exact`.

    Args:
        grid: The grid carrying p.
        p: Interior nodal values.
        exact: Vectorized reference function.
        order: Gauss-Legendre points per element.

    Returns:
        The continuous L² norm of the difference.
    """
    values = np.concatenate([[0.0], _as_vector(p, grid.n_interior, "state p"), [0.0]])
    xi, wi = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (xi + 1.0)
    left = grid.all_nodes[:-1]
    x = left[:, None] + grid.h * t[None, :]
    ph = values[:-1, None] * (1.0 - t)[None, :] + values[1:, None] * t[None, :]
    diff = ph - exact(x)
    return float(np.sqrt(np.sum(0.5 * grid.h * wi[None, :] * diff**2)))


def l2_error_2d(
    mesh: Mesh2D, p: ArrayLike, exact: Callable[[FloatArray, FloatArray], FloatArray]
) -> float:
    """L² distance between a P1 function with zero boundary values and `exact`.

    Uses the degree-2 three-point rule at barycentric (2/3, 1/6, 1/6) and
    its permutations.
    """
    values = np.zeros(mesh.n_nodes)
    values[mesh.interior_index] = _as_vector(p, mesh.n_interior, "state p")
    bary: NDArray[np.float64] = np.array(
        [[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]
    )
    corners = mesh.points[mesh.triangles]
    qp = np.einsum("qi,tid->tqd", bary, corners)
    ph = np.einsum("qi,ti->tq", bary, values[mesh.triangles])
    diff = ph - exact(qp[..., 0], qp[..., 1])
    return float(np.sqrt(np.sum(mesh.areas()[:, None] / 3.0 * diff**2)))
