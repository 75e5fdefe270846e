"""Grids and triangulations for the finite-element models.

The text mesh format is line based:

    # comment lines are ignored
    nodes <N>
    <index> <x> <y> <boundary flag 0|1>      (N lines)
    elements <T>
    <node a> <node b> <node c>               (T lines, counter-clockwise)

Floats are written with 17 significant digits so a file read back gives the
identical mesh.
"""

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from oneshot_eki import logging_config
from oneshot_eki.exceptions import InvalidMeshError, ObservationPointError

logger = logging_config.get_logger(__name__)

FloatArray = NDArray[np.float64]
IndexArray = NDArray[np.int64]

REFERENCE_MESH_FILE = "unit_square_95.mesh"
REFERENCE_CELLS = 10
# Cells (i, j) of the 10x10 grid that receive a centre node in the shipped mesh.
REFERENCE_CENTRE_CELLS: tuple[tuple[int, int], ...] = (
    *((k, k) for k in range(REFERENCE_CELLS)),
    (1, 6),
    (6, 1),
    (3, 8),
    (8, 3),
)
BOUNDARY_TOL = 1e-12


@dataclass(frozen=True, slots=True)
class Grid1D:
    """Uniform grid on (0, length) with `n_interior` interior nodes.

    The default is the 64-node grid on (0, π) with h = π/65.
    """

    n_interior: int = 64
    length: float = math.pi

    def __post_init__(self) -> None:
        """Reject empty grids and non-positive lengths."""
        if self.n_interior < 1:
            raise InvalidMeshError(f"need at least one interior node, got {self.n_interior}")
        if not self.length > 0:
            raise InvalidMeshError(f"domain length must be positive, got {self.length}")

    @property
    def h(self) -> float:
        """Mesh width."""
        return self.length / (self.n_interior + 1)

    @property
    def nodes(self) -> FloatArray:
        """Interior node coordinates, strictly increasing."""
        return self.h * np.arange(1, self.n_interior + 1, dtype=np.float64)

    @property
    def all_nodes(self) -> FloatArray:
        """Node coordinates including both boundary nodes."""
        return self.h * np.arange(0, self.n_interior + 2, dtype=np.float64)

    def refined(self) -> "Grid1D":
        """Return the grid with half the mesh width."""
        return Grid1D(2 * self.n_interior + 1, self.length)


@dataclass(frozen=True, eq=False)
class Mesh2D:
    """Triangulation of the unit square.

    Attributes:
        points: Node coordinates, shape (N, 2).
        triangles: Counter-clockwise node triples, shape (T, 3).
        boundary: Boolean flag per node, True on ∂D.
    """

    points: FloatArray
    triangles: IndexArray
    boundary: NDArray[np.bool_]
    _interior: IndexArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Validate the triangulation.

        Raises:
            InvalidMeshError: If a triangle is degenerate or clockwise, a
                boundary node is off ∂D, an interior node is on ∂D, or an
                interior node belongs to fewer than 3 triangles.
        """
        points = np.asarray(self.points, dtype=np.float64)
        triangles = np.asarray(self.triangles, dtype=np.int64)
        boundary = np.asarray(self.boundary, dtype=np.bool_)
        if points.ndim != 2 or points.shape[1] != 2:  # noqa: PLR2004
            raise InvalidMeshError(f"points must have shape (N, 2), got {points.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:  # noqa: PLR2004
            raise InvalidMeshError(f"triangles must have shape (T, 3), got {triangles.shape}")
        if boundary.shape != (points.shape[0],):
            raise InvalidMeshError("boundary flags must have one entry per node")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= points.shape[0]):
            raise InvalidMeshError("triangle references a node that does not exist")

        areas = _signed_areas(points, triangles)
        if np.any(areas <= 0):
            bad = int(np.argmin(areas))
            raise InvalidMeshError(f"triangle {bad} has non-positive area {areas[bad]:.3g}")

        distance = np.min(np.column_stack([points, 1.0 - points]), axis=1)
        if np.any(np.abs(distance[boundary]) > BOUNDARY_TOL):
            raise InvalidMeshError("boundary node not on the boundary of the unit square")
        if np.any(distance[~boundary] <= BOUNDARY_TOL):
            raise InvalidMeshError("interior node lies on or outside the boundary")

        counts = np.bincount(triangles.reshape(-1), minlength=points.shape[0])
        interior = np.flatnonzero(~boundary)
        if np.any(counts[interior] < 3):  # noqa: PLR2004
            raise InvalidMeshError("interior node belongs to fewer than 3 triangles")

        object.__setattr__(self, "points", points)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "_interior", interior.astype(np.int64))

    @property
    def n_nodes(self) -> int:
        """Total number of nodes."""
        return self.points.shape[0]

    @property
    def interior_index(self) -> IndexArray:
        """Indices of the interior nodes, increasing."""
        return self._interior

    @property
    def n_interior(self) -> int:
        """Number of interior nodes."""
        return self._interior.shape[0]

    @property
    def n_boundary(self) -> int:
        """Number of boundary nodes."""
        return int(np.count_nonzero(self.boundary))

    @property
    def interior_points(self) -> FloatArray:
        """Coordinates of the interior nodes, shape (n_interior, 2)."""
        return self.points[self._interior]

    def areas(self) -> FloatArray:
        """Triangle areas."""
        return _signed_areas(self.points, self.triangles)

    def locate(self, point: ArrayLike) -> tuple[int, FloatArray]:
        """Find a triangle containing `point` and its barycentric coordinates.

        Args:
            point: Coordinates (x, y).

        Returns:
            Tuple of triangle index and the three barycentric weights, which
            are non-negative and sum to one.

        Raises:
            ObservationPointError: If the point is outside every triangle.
        """
        p = np.asarray(point, dtype=np.float64).reshape(2)
        corners = self.points[self.triangles]
        a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
        det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        l1 = ((b[:, 0] - p[0]) * (c[:, 1] - p[1]) - (c[:, 0] - p[0]) * (b[:, 1] - p[1])) / det
        l2 = ((c[:, 0] - p[0]) * (a[:, 1] - p[1]) - (a[:, 0] - p[0]) * (c[:, 1] - p[1])) / det
        l3 = 1.0 - l1 - l2
        weights = np.column_stack([l1, l2, l3])
        inside = np.flatnonzero(np.all(weights >= -BOUNDARY_TOL, axis=1))
        if inside.size == 0:
            raise ObservationPointError(tuple(float(v) for v in p))
        tri = int(inside[0])
        w = np.clip(weights[tri], 0.0, 1.0)
        return tri, w / w.sum()


def _signed_areas(points: FloatArray, triangles: IndexArray) -> FloatArray:
    corners = points[triangles]
    ab = corners[:, 1] - corners[:, 0]
    ac = corners[:, 2] - corners[:, 0]
    return 0.5 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])


def _grid_points(cells: int) -> tuple[FloatArray, NDArray[np.bool_]]:
    """Nodes of the (cells+1)² lattice, numbered j*(cells+1) + i."""
    coords = [(i / cells, j / cells) for j in range(cells + 1) for i in range(cells + 1)]
    flags = [
        i in {0, cells} or j in {0, cells} for j in range(cells + 1) for i in range(cells + 1)
    ]
    return np.array(coords, dtype=np.float64), np.array(flags, dtype=np.bool_)


def _cell_corners(i: int, j: int, cells: int) -> tuple[int, int, int, int]:
    """Lower-left, lower-right, upper-right and upper-left node of cell (i, j)."""
    row = cells + 1
    a = j * row + i
    return a, a + 1, a + row + 1, a + row


def structured_unit_square(cells: int) -> Mesh2D:
    """Uniform mesh of the unit square with `cells`² squares split along "/".

    Args:
        cells: Number of cells per side, at least 2.

    Returns:
        A mesh with (cells − 1)² interior and 4·cells boundary nodes.
    """
    if cells < 2:  # noqa: PLR2004
        raise InvalidMeshError(f"need at least 2 cells per side, got {cells}")
    points, boundary = _grid_points(cells)
    triangles: list[tuple[int, int, int]] = []
    for j in range(cells):
        for i in range(cells):
            a, b, d, e = _cell_corners(i, j, cells)
            triangles.extend([(a, b, d), (a, d, e)])
    return Mesh2D(points, np.array(triangles, dtype=np.int64), boundary)


def build_reference_mesh() -> Mesh2D:
    """Construct the shipped 95/40 node mesh of the unit square.

    Starts from the 10×10 "/" lattice (81 interior, 40 boundary nodes) and
    inserts a centre node into 14 cells chosen symmetrically about the
    diagonal; each such cell is split into four triangles around its centre.
    The result is symmetric under (x, y) ↦ (y, x).

    Returns:
        The reference mesh with 95 interior and 40 boundary nodes.
    """
    cells = REFERENCE_CELLS
    points, boundary = _grid_points(cells)
    centre_cells = sorted(REFERENCE_CENTRE_CELLS, key=lambda cell: (cell[1], cell[0]))
    centre_index: dict[tuple[int, int], int] = {}
    centres: list[tuple[float, float]] = []
    for i, j in centre_cells:
        centre_index[i, j] = points.shape[0] + len(centres)
        centres.append(((i + 0.5) / cells, (j + 0.5) / cells))

    triangles: list[tuple[int, int, int]] = []
    for j in range(cells):
        for i in range(cells):
            a, b, d, e = _cell_corners(i, j, cells)
            c = centre_index.get((i, j))
            if c is None:
                triangles.extend([(a, b, d), (a, d, e)])
            else:
                triangles.extend([(a, b, c), (b, d, c), (d, e, c), (e, a, c)])

    all_points = np.vstack([points, np.array(centres, dtype=np.float64)])
    all_boundary = np.concatenate([boundary, np.zeros(len(centres), dtype=np.bool_)])
    return Mesh2D(all_points, np.array(triangles, dtype=np.int64), all_boundary)


def write_mesh(mesh: Mesh2D, path: Path) -> None:
    """Write a mesh in the plain-text node/element format.

    Args:
        mesh: The mesh to write.
        path: Destination file.
    """
    lines = [
        "# oneshot-eki triangular mesh of the unit square",
        f"# {mesh.n_interior} interior nodes, {mesh.n_boundary} boundary nodes",
        f"nodes {mesh.n_nodes}",
    ]
    lines.extend(
        f"{k} {x:.17g} {y:.17g} {int(flag)}"
        for k, ((x, y), flag) in enumerate(zip(mesh.points, mesh.boundary, strict=True))
    )
    lines.append(f"elements {mesh.triangles.shape[0]}")
    lines.extend(f"{a} {b} {c}" for a, b, c in mesh.triangles)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug("Wrote mesh with %d nodes to %s", mesh.n_nodes, path)


def parse_mesh(text: str, source: str = "<string>") -> Mesh2D:
    """Parse the node/element text format.

    Args:
        text: File contents.
        source: Name used in error messages.

    Returns:
        The validated mesh.

    Raises:
        InvalidMeshError: If the text is malformed or the mesh is invalid.
    """
    rows = [
        line.split()
        for line in text.splitlines()
        if line.strip() and not line.lstrip().startswith("#")
    ]
    try:
        if rows[0][0] != "nodes":
            raise InvalidMeshError(f"{source}: expected 'nodes' header")
        n_nodes = int(rows[0][1])
        node_rows = rows[1 : 1 + n_nodes]
        header = rows[1 + n_nodes]
        if header[0] != "elements":
            raise InvalidMeshError(f"{source}: expected 'elements' header")
        n_elements = int(header[1])
        element_rows = rows[2 + n_nodes : 2 + n_nodes + n_elements]
        if len(node_rows) != n_nodes or len(element_rows) != n_elements:
            raise InvalidMeshError(f"{source}: truncated file")
        if [int(row[0]) for row in node_rows] != list(range(n_nodes)):
            raise InvalidMeshError(f"{source}: node indices must be 0..N-1 in order")
        points = np.array([[float(row[1]), float(row[2])] for row in node_rows])
        boundary = np.array([row[3] == "1" for row in node_rows], dtype=np.bool_)
        triangles = np.array([[int(v) for v in row[:3]] for row in element_rows], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise InvalidMeshError(f"{source}: {exc}") from exc
    return Mesh2D(points, triangles, boundary)


def read_mesh(path: Path) -> Mesh2D:
    """Read a mesh file written by `write_mesh`."""
    return parse_mesh(path.read_text(encoding="utf-8"), str(path))


def load_reference_mesh() -> Mesh2D:
    """Load the 95/40 node mesh shipped with the package."""
    resource = resources.files("oneshot_eki").joinpath("data").joinpath(REFERENCE_MESH_FILE)
    return parse_mesh(resource.read_text(encoding="utf-8"), REFERENCE_MESH_FILE)


def sample_observation_points(count: int, rng: np.random.Generator) -> FloatArray:
    """Draw `count` points uniformly from the open unit square."""
    return rng.uniform(0.0, 1.0, size=(count, 2))
