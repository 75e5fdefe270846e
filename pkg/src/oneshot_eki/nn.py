"""Feed-forward sigmoid networks used as state surrogates.

A network with layer sizes N₁..N_L on inputs of dimension N₀ is stored as a
flat parameter vector θ. The canonical layout is, for ℓ = 1..L, the weight
matrix W_ℓ (shape N_ℓ × N_{ℓ−1}) in row-major order followed by the bias
b_ℓ. Hidden layers apply the sigmoid; the output layer is affine.
"""

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit

from oneshot_eki.core import FloatArray
from oneshot_eki.exceptions import DimensionMismatchError, InvalidArchitectureError

SIGMOID_CUTOFF = 500.0

LayerParams = tuple[FloatArray, FloatArray]


@dataclass(frozen=True, slots=True)
class NetworkArchitecture:
    """Input dimension and layer widths; the last width is the output size."""

    input_dim: int
    layer_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        """Validate widths.

        Raises:
            InvalidArchitectureError: If there are no layers or a width < 1.
        """
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if self.input_dim < 1:
            raise InvalidArchitectureError(f"input dimension must be >= 1, got {self.input_dim}")
        if not self.layer_sizes:
            raise InvalidArchitectureError("at least one layer is required")
        if any(n < 1 for n in self.layer_sizes):
            raise InvalidArchitectureError(f"layer sizes must be >= 1, got {self.layer_sizes}")

    @classmethod
    def scalar_field(cls, input_dim: int, hidden_layers: tuple[int, ...]) -> "NetworkArchitecture":
        """Architecture with the given hidden widths and a single output."""
        return cls(input_dim, (*hidden_layers, 1))

    @property
    def depth(self) -> int:
        """Number of layers L."""
        return len(self.layer_sizes)

    @property
    def widths(self) -> tuple[int, ...]:
        """(N₀, N₁, ..., N_L)."""
        return (self.input_dim, *self.layer_sizes)


def param_count(arch: NetworkArchitecture) -> int:
    """Return n_θ = Σ_ℓ (N_{ℓ−1} + 1) N_ℓ."""
    widths = arch.widths
    return sum((n_in + 1) * n_out for n_in, n_out in zip(widths[:-1], widths[1:], strict=True))


def unflatten(arch: NetworkArchitecture, theta: ArrayLike) -> list[LayerParams]:
    """Split θ into per-layer (W_ℓ, b_ℓ) views.

    Raises:
        DimensionMismatchError: If len(θ) ≠ n_θ.
    """
    flat = np.asarray(theta, dtype=np.float64).reshape(-1)
    expected = param_count(arch)
    if flat.shape[0] != expected:
        raise DimensionMismatchError("network parameters", expected, flat.shape[0])
    layers: list[LayerParams] = []
    offset = 0
    widths = arch.widths
    for n_in, n_out in zip(widths[:-1], widths[1:], strict=True):
        weights = flat[offset : offset + n_in * n_out].reshape(n_out, n_in)
        offset += n_in * n_out
        bias = flat[offset : offset + n_out]
        offset += n_out
        layers.append((weights, bias))
    return layers


def flatten(layers: list[LayerParams]) -> FloatArray:
    """Inverse of `unflatten`."""
    parts: list[FloatArray] = []
    for weights, bias in layers:
        parts.extend([np.asarray(weights, dtype=np.float64).reshape(-1), np.asarray(bias, dtype=np.float64)])
    return np.concatenate(parts)


def sigmoid(z: ArrayLike) -> FloatArray:
    """Logistic function, exactly 0 below −500 and exactly 1 above 500."""
    arr = np.asarray(z, dtype=np.float64)
    return np.where(arr < -SIGMOID_CUTOFF, 0.0, np.where(arr > SIGMOID_CUTOFF, 1.0, expit(arr)))


def _forward(arch: NetworkArchitecture, theta: ArrayLike, inputs: FloatArray) -> FloatArray:
    activations = inputs
    layers = unflatten(arch, theta)
    for depth, (weights, bias) in enumerate(layers, start=1):
        z = activations @ weights.T + bias
        activations = z if depth == arch.depth else sigmoid(z)
    return activations


def eval_network(arch: NetworkArchitecture, theta: ArrayLike, x: ArrayLike) -> float | FloatArray:
    """Evaluate the network at one point.

    Args:
        arch: The architecture.
        theta: Flat parameters of length n_θ.
        x: Input point of dimension N₀ (a scalar is accepted when N₀ = 1).

    Returns:
        A float for single-output networks, otherwise the output vector.
    """
    point = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if point.shape[1] != arch.input_dim:
        raise DimensionMismatchError("network input", arch.input_dim, point.shape[1])
    out = _forward(arch, theta, point)[0]
    return float(out[0]) if out.shape[0] == 1 else out


def eval_on_grid(arch: NetworkArchitecture, theta: ArrayLike, points: ArrayLike) -> FloatArray:
    """Evaluate a single-output network at every row of `points`.

    Args:
        arch: The architecture; its last layer must have width 1.
        theta: Flat parameters of length n_θ.
        points: Grid of shape (n_p, N₀), or (n_p,) when N₀ = 1.

    Returns:
        Vector p_θ of length n_p.
    """
    grid = np.asarray(points, dtype=np.float64).reshape(-1, arch.input_dim)
    if arch.layer_sizes[-1] != 1:
        raise InvalidArchitectureError("grid evaluation needs a single output")
    return _forward(arch, theta, grid)[:, 0]


@runtime_checkable
class StateSurrogate(Protocol):
    """Map from surrogate parameters θ to a state vector p_θ."""

    @property
    def n_params(self) -> int:
        """Length of θ."""
        ...

    @property
    def n_p(self) -> int:
        """Length of the produced state."""
        ...

    @property
    def is_linear(self) -> bool:
        """True when p_θ = Bθ for a fixed matrix B."""
        ...

    def state(self, theta: ArrayLike) -> FloatArray:
        """Return p_θ."""
        ...


class NetworkSurrogate:
    """p_θ given by a network evaluated at the interior nodes."""

    def __init__(self, arch: NetworkArchitecture, points: ArrayLike) -> None:
        """Bind an architecture to the interior node coordinates."""
        self.arch = arch
        self.points: FloatArray = np.asarray(points, dtype=np.float64).reshape(-1, arch.input_dim)

    @property
    def n_params(self) -> int:
        """n_θ."""
        return param_count(self.arch)

    @property
    def n_p(self) -> int:
        """Number of grid points."""
        return self.points.shape[0]

    @property
    def is_linear(self) -> bool:
        """Always False."""
        return False

    def state(self, theta: ArrayLike) -> FloatArray:
        """Return the network evaluated on the grid."""
        return eval_on_grid(self.arch, theta, self.points)


class LinearSurrogate:
    """p_θ = Bθ for a fixed matrix B."""

    def __init__(self, matrix: ArrayLike) -> None:
        """Store B with shape (n_p, n_params)."""
        self.matrix: NDArray[np.float64] = np.atleast_2d(np.asarray(matrix, dtype=np.float64))

    @property
    def n_params(self) -> int:
        """Number of columns of B."""
        return self.matrix.shape[1]

    @property
    def n_p(self) -> int:
        """Number of rows of B."""
        return self.matrix.shape[0]

    @property
    def is_linear(self) -> bool:
        """Always True."""
        return True

    def state(self, theta: ArrayLike) -> FloatArray:
        """Return Bθ."""
        vec = np.asarray(theta, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.n_params:
            raise DimensionMismatchError("surrogate parameters", self.n_params, vec.shape[0])
        return self.matrix @ vec


class IdentitySurrogate(LinearSurrogate):
    """p_θ = θ: the state itself is the unknown (finite-element one-shot)."""

    def __init__(self, n_p: int) -> None:
        """Use the identity on R^{n_p}."""
        super().__init__(np.eye(n_p))

    def state(self, theta: ArrayLike) -> FloatArray:
        """Return a copy of θ."""
        vec = np.array(theta, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.n_params:
            raise DimensionMismatchError("state vector", self.n_params, vec.shape[0])
        return vec
