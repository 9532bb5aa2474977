"""Structured 2D meshes for the two-scale solver.

Meshes are generated, never imported: regular grids of bilinear quads or
linear triangles over a rectangle, pixel-grid microstructures with one
element (or split-quad pair) per pixel, nested uniform refinement, and
periodic boundary-node pairing for RVE coupling.

All meshes carry a per-element phase label in {1, 2} selecting the material
parameters of that element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MeshError, PairingError

QUAD4 = "quad4"
TRI3 = "tri3"

_KINDS = (QUAD4, TRI3)


@dataclass(frozen=True)
class Mesh:
    """Immutable 2D mesh: node coordinates, connectivity and phase labels.

    Attributes
    ----------
    nodes : ndarray, shape (n_nodes, 2)
        Coordinates in mm.
    elems : ndarray, shape (n_elems, 4) or (n_elems, 3)
        Node indices, counterclockwise.
    kind : str
        ``"quad4"`` or ``"tri3"``.
    phase : ndarray, shape (n_elems,)
        Material phase id per element, values in {1, 2}.
    grid : tuple or None
        ``(nx, ny)`` cell counts when the mesh is a structured lattice over
        its bounding box; None otherwise.  Required for uniform refinement
        and O(1) point location.
    """

    nodes: np.ndarray
    elems: np.ndarray
    kind: str
    phase: np.ndarray
    grid: tuple | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise MeshError(f"unknown element kind {self.kind!r}")
        if self.elems.min(initial=0) < 0 or self.elems.max(initial=-1) >= len(self.nodes):
            raise MeshError("connectivity index out of range")
        if len(self.phase) != len(self.elems):
            raise MeshError("phase must be defined for every element")
        bad = set(np.unique(self.phase)) - {1, 2}
        if bad:
            raise MeshError(f"invalid phase labels {sorted(bad)}")
        self.nodes.setflags(write=False)
        self.elems.setflags(write=False)
        self.phase.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elems(self) -> int:
        return len(self.elems)

    @property
    def ndof(self) -> int:
        return 2 * len(self.nodes)

    @property
    def bbox(self) -> np.ndarray:
        """Axis-aligned bounds, rows (min, max)."""
        return np.array([self.nodes.min(axis=0), self.nodes.max(axis=0)])


@dataclass(frozen=True)
class PhaseGrid:
    """Pixel image of a two-phase microstructure.

    ``cells`` is row-major with row index 0 at the bottom of the domain,
    x running fastest.
    """

    nx: int
    ny: int
    cells: np.ndarray

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("pixel counts must be positive")
        if self.cells.size != self.nx * self.ny:
            raise ValueError("cell count does not match nx*ny")
        bad = set(np.unique(self.cells)) - {1, 2}
        if bad:
            raise ValueError(f"invalid phase labels {sorted(bad)}")
        self.cells.setflags(write=False)

    def as_array(self) -> np.ndarray:
        """Cells as an (ny, nx) array, row 0 at the bottom."""
        return self.cells.reshape(self.ny, self.nx)

    def volume_fractions(self) -> dict[int, float]:
        n = self.cells.size
        return {p: float(np.count_nonzero(self.cells == p)) / n for p in (1, 2)}

    def tile(self, m: int) -> "PhaseGrid":
        """Repeat the pattern m times in each direction (RVE of m x m cells)."""
        if m < 1:
            raise ValueError("tile count must be positive")
        a = np.tile(self.as_array(), (m, m))
        return PhaseGrid(self.nx * m, self.ny * m, a.ravel().copy())


@dataclass(frozen=True)
class PeriodicPairing:
    """Opposite-edge node pairing of a square RVE mesh.

    ``pairs[k] = (p, q)`` with node q on the high side, so that
    ``x_q - x_p`` equals one lattice vector (+delta*e1 or +delta*e2).
    The 4 corner nodes are excluded from pairs and listed separately in the
    order (0,0), (d,0), (d,d), (0,d).
    """

    pairs: np.ndarray
    corners: np.ndarray
    tolerance: float
    delta: float = field(default=0.0)


def _lattice(width, height, nx, ny):
    x = np.linspace(0.0, width, nx + 1)
    y = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(x, y)
    return np.column_stack([X.ravel(), Y.ravel()])


def _cell_corner_ids(nx, ny):
    """Node ids (n00, n10, n11, n01) per cell of an (nx, ny) lattice."""
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    ix = ix.ravel()
    iy = iy.ravel()
    n00 = iy * (nx + 1) + ix
    n10 = n00 + 1
    n01 = n00 + (nx + 1)
    n11 = n01 + 1
    return np.column_stack([n00, n10, n11, n01])


def _grid_mesh(width, height, nx, ny, kind, cell_phase):
    nodes = _lattice(width, height, nx, ny)
    quads = _cell_corner_ids(nx, ny)
    if kind == QUAD4:
        elems = quads
        phase = cell_phase
    else:
        # split each cell along the lower-left to upper-right diagonal
        lower = quads[:, [0, 1, 2]]
        upper = quads[:, [0, 2, 3]]
        elems = np.empty((2 * len(quads), 3), dtype=np.int64)
        elems[0::2] = lower
        elems[1::2] = upper
        phase = np.repeat(cell_phase, 2)
    return Mesh(nodes, np.ascontiguousarray(elems, dtype=np.int64), kind,
                np.ascontiguousarray(phase, dtype=np.int64), grid=(nx, ny))


def generate_structured(width: float, height: float, nx: int, ny: int,
                        kind: str = QUAD4) -> Mesh:
    """Regular nx-by-ny mesh of [0, width] x [0, height], single phase.

    Parameters
    ----------
    width, height : float
        Domain size in mm, must be positive.
    nx, ny : int
        Cell counts, must be >= 1.
    kind : str
        ``"quad4"`` (one element per cell) or ``"tri3"`` (two per cell).
    """
    if width <= 0 or height <= 0:
        raise ValueError("domain dimensions must be positive")
    if nx < 1 or ny < 1:
        raise ValueError("cell counts must be positive")
    phase = np.ones(nx * ny, dtype=np.int64)
    return _grid_mesh(width, height, nx, ny, kind, phase)


def mesh_from_phase_grid(grid: PhaseGrid, delta: float, kind: str = QUAD4) -> Mesh:
    """Mesh of [0, delta]^2 with one cell per pixel, inheriting pixel phases."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return _grid_mesh(delta, delta, grid.nx, grid.ny, kind, grid.cells.copy())


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every cell in four; child elements inherit the parent phase.

    Parent nodes stay in place (the refined lattice contains the coarse one),
    so nodal fields prolong exactly for linear fields.
    """
    if mesh.grid is None:
        raise MeshError("uniform refinement requires a structured mesh")
    nx, ny = mesh.grid
    lo, hi = mesh.bbox
    per_cell = 1 if mesh.kind == QUAD4 else 2
    cell_phase = np.asarray(mesh.phase[::per_cell]).reshape(ny, nx)
    child = np.kron(cell_phase, np.ones((2, 2), dtype=np.int64))
    return _grid_mesh(hi[0] - lo[0], hi[1] - lo[1], 2 * nx, 2 * ny, mesh.kind,
                      child.ravel())


def pair_periodic_nodes(mesh: Mesh, delta: float) -> PeriodicPairing:
    """Match boundary nodes of a [0, delta]^2 mesh across opposite edges.

    Corners are excluded from pairs.  Raises PairingError when a non-corner
    boundary node has no counterpart within the geometric tolerance.
    """
    tol = 1e-9 * delta
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    on = {
        "left": np.flatnonzero(np.abs(x) < tol),
        "right": np.flatnonzero(np.abs(x - delta) < tol),
        "bottom": np.flatnonzero(np.abs(y) < tol),
        "top": np.flatnonzero(np.abs(y - delta) < tol),
    }

    corner_coords = [(0.0, 0.0), (delta, 0.0), (delta, delta), (0.0, delta)]
    corners = []
    for cx, cy in corner_coords:
        hit = np.flatnonzero((np.abs(x - cx) < tol) & (np.abs(y - cy) < tol))
        if len(hit) != 1:
            raise PairingError(f"expected one node at corner ({cx}, {cy}), found {len(hit)}")
        corners.append(hit[0])
    corner_set = set(corners)

    def match(low_ids, high_ids, axis):
        low = [i for i in low_ids if i not in corner_set]
        high = [i for i in high_ids if i not in corner_set]
        low = sorted(low, key=lambda i: mesh.nodes[i, axis])
        high = sorted(high, key=lambda i: mesh.nodes[i, axis])
        if len(low) != len(high):
            raise PairingError(
                f"opposite edges carry {len(low)} vs {len(high)} non-corner nodes")
        out = []
        for p, q in zip(low, high):
            if abs(mesh.nodes[p, axis] - mesh.nodes[q, axis]) > tol:
                raise PairingError(
                    f"unmatched boundary node at {tuple(mesh.nodes[p])}")
            out.append((p, q))
        return out

    pairs = match(on["left"], on["right"], axis=1) + match(on["bottom"], on["top"], axis=0)
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return PeriodicPairing(pairs=pairs, corners=np.array(corners, dtype=np.int64),
                           tolerance=tol, delta=delta)


def read_phase_grid(path) -> PhaseGrid:
    """Load a phase grid from a plain-text file or an ASCII PGM (P2) image.

    Text format: first line ``nx ny``, then ny rows of nx labels in {1, 2},
    first row on top.  PGM pixels below mid-gray map to phase 1, the rest to
    phase 2.
    """
    with open(path) as f:
        tokens = []
        for line in f:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    if not tokens:
        raise ValueError(f"empty phase-grid file {path}")
    if tokens[0] == "P2":
        nx, ny, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = np.array(tokens[4:4 + nx * ny], dtype=np.int64)
        if vals.size != nx * ny:
            raise ValueError("truncated PGM data")
        cells = np.where(vals < (maxval + 1) // 2, 1, 2)
    else:
        nx, ny = int(tokens[0]), int(tokens[1])
        cells = np.array(tokens[2:2 + nx * ny], dtype=np.int64)
        if cells.size != nx * ny:
            raise ValueError("truncated phase-grid data")
    # file rows run top to bottom; storage has row 0 at the bottom
    cells = cells.reshape(ny, nx)[::-1].ravel()
    return PhaseGrid(nx, ny, cells.copy())


def write_phase_grid(path, grid: PhaseGrid) -> None:
    """Write the plain-text format accepted by read_phase_grid."""
    rows = grid.as_array()[::-1]
    with open(path, "w") as f:
        f.write(f"{grid.nx} {grid.ny}\n")
        for row in rows:
            f.write(" ".join(str(int(v)) for v in row) + "\n")
