"""Uniform Cartesian grids with an exterior halo, grid functions, and discrete jets.

The lattice covers the closed box plus a halo band on every side, so that
nonlocal jump evaluations ``x + z`` stay inside stored data.  Interior nodes
are strictly inside the open box; every other lattice node (including the
box faces) is exterior and carries boundary data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridError, ReachError

# relative tolerance for "axis length is an integer multiple of h"
COMMENSURATE_RTOL = 1e-12
# fraction of h below which a coordinate is treated as exactly on-lattice
LATTICE_SNAP = 1e-9


def _normalize_box(box) -> tuple[tuple[float, float], ...]:
    arr = np.asarray(box, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GridError(f"box must be (lo, hi) or a sequence of per-axis (lo, hi) pairs, got shape {arr.shape}")
    if arr.shape[0] not in (1, 2):
        raise GridError(f"only dimensions 1 and 2 are supported, got {arr.shape[0]} axes")
    for k, (lo, hi) in enumerate(arr):
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
            raise GridError(f"axis {k}: interval [{lo}, {hi}] is not a bounded nondegenerate interval")
    return tuple((float(lo), float(hi)) for lo, hi in arr)


@dataclass(frozen=True)
class Grid:
    """Uniform lattice over a box, extended by ``halo_radius`` on every side.

    Attributes:
        box: per-axis closed intervals of the domain.
        h: lattice spacing, shared by all axes.
        halo_radius: width of the exterior band kept for jump evaluation.
    """

    box: tuple[tuple[float, float], ...]
    h: float
    halo_radius: float
    # derived lattice data, not part of identity
    halo_steps: int = field(init=False, compare=False, repr=False)
    intervals: tuple[int, ...] = field(init=False, compare=False, repr=False)
    shape: tuple[int, ...] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        box = _normalize_box(self.box)
        object.__setattr__(self, "box", box)
        if not (self.h > 0 and np.isfinite(self.h)):
            raise GridError(f"spacing h must be positive, got {self.h}")
        if self.halo_radius < 0 or not np.isfinite(self.halo_radius):
            raise GridError(f"halo_radius must be nonnegative, got {self.halo_radius}")
        intervals = []
        for k, (lo, hi) in enumerate(box):
            ratio = (hi - lo) / self.h
            n = round(ratio)
            if n < 1 or abs(ratio - n) > COMMENSURATE_RTOL * max(1.0, abs(ratio)):
                raise GridError(
                    f"axis {k}: length {hi - lo} is not an integer multiple of h={self.h} "
                    f"(ratio {ratio})"
                )
            intervals.append(n)
        halo_steps = int(math.ceil(self.halo_radius / self.h - LATTICE_SNAP)) if self.halo_radius > 0 else 0
        object.__setattr__(self, "halo_steps", halo_steps)
        object.__setattr__(self, "intervals", tuple(intervals))
        object.__setattr__(self, "shape", tuple(n + 1 + 2 * halo_steps for n in intervals))

    # -- basic geometry ----------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.box)

    def axis_coords(self, k: int) -> np.ndarray:
        lo = self.box[k][0]
        idx = np.arange(self.shape[k]) - self.halo_steps
        out = lo + idx * self.h
        out.flags.writeable = False
        return out

    def coords(self, node) -> np.ndarray:
        """Coordinates of a lattice node given by its index tuple."""
        node = self._node(node)
        return np.array([self.box[k][0] + (node[k] - self.halo_steps) * self.h for k in range(self.dim)])

    def _node(self, node) -> tuple[int, ...]:
        if np.isscalar(node):
            node = (int(node),)
        node = tuple(int(i) for i in node)
        if len(node) != self.dim:
            raise GridError(f"node index {node} has wrong dimension for a {self.dim}-d grid")
        for k, i in enumerate(node):
            if not (0 <= i < self.shape[k]):
                raise GridError(f"node index {node} outside lattice of shape {self.shape}")
        return node

    def node_at(self, point) -> tuple[int, ...]:
        """Index tuple of the lattice node at ``point`` (must lie on the lattice)."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        if point.shape != (self.dim,):
            raise GridError(f"point {point} has wrong dimension for a {self.dim}-d grid")
        idx = []
        for k in range(self.dim):
            s = (point[k] - self.box[k][0]) / self.h + self.halo_steps
            i = round(s)
            if abs(s - i) > LATTICE_SNAP or not (0 <= i < self.shape[k]):
                raise GridError(f"point {point} is not a lattice node (axis {k})")
            idx.append(int(i))
        return tuple(idx)

    def is_interior(self, node) -> bool:
        node = self._node(node)
        return all(self.halo_steps + 1 <= node[k] <= self.halo_steps + self.intervals[k] - 1 for k in range(self.dim))

    def interior_slices(self) -> tuple[slice, ...]:
        return tuple(slice(self.halo_steps + 1, self.halo_steps + n) for n in self.intervals)

    def interior_nodes(self) -> list[tuple[int, ...]]:
        """All interior node index tuples in lexicographic order."""
        ranges = [range(self.halo_steps + 1, self.halo_steps + n) for n in self.intervals]
        if self.dim == 1:
            return [(i,) for i in ranges[0]]
        return [(i, j) for i in ranges[0] for j in ranges[1]]

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[self.interior_slices()] = True
        return mask

    def interior_points(self) -> np.ndarray:
        """Coordinates of interior nodes, shape (n_interior, dim), lexicographic."""
        axes = [self.axis_coords(k)[self.interior_slices()[k]] for k in range(self.dim)]
        if self.dim == 1:
            return axes[0][:, None]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def meshgrid(self) -> tuple[np.ndarray, ...]:
        return np.meshgrid(*[self.axis_coords(k) for k in range(self.dim)], indexing="ij")

    def hull(self) -> tuple[tuple[float, float], ...]:
        """Extent of the stored lattice (box plus halo) per axis."""
        return tuple(
            (self.box[k][0] - self.halo_steps * self.h, self.box[k][0] + (self.intervals[k] + self.halo_steps) * self.h)
            for k in range(self.dim)
        )

    def in_closure(self, point) -> bool:
        """Whether ``point`` lies in the closed box (tolerance ``LATTICE_SNAP * h``)."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        tol = LATTICE_SNAP * self.h
        return all(self.box[k][0] - tol <= point[k] <= self.box[k][1] + tol for k in range(self.dim))

    def boundary_distance(self, point) -> float:
        """Distance from an interior point to the box boundary."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return min(min(point[k] - self.box[k][0], self.box[k][1] - point[k]) for k in range(self.dim))

    def closure_nodes(self) -> list[tuple[int, ...]]:
        """Lattice nodes lying in the closed box, lexicographic order."""
        ranges = [range(self.halo_steps, self.halo_steps + n + 1) for n in self.intervals]
        if self.dim == 1:
            return [(i,) for i in ranges[0]]
        return [(i, j) for i in ranges[0] for j in ranges[1]]


def make_grid(box, h: float, halo_radius: float = 0.0) -> Grid:
    """Build a uniform grid over ``box`` with spacing ``h`` and an exterior halo.

    The halo band is at least ``halo_radius`` wide (rounded up to whole steps)
    so every jump of magnitude up to ``halo_radius`` stays on stored nodes.
    """
    return Grid(box=_normalize_box(box), h=float(h), halo_radius=float(halo_radius))


class GridFunction:
    """Real values on every lattice node of a :class:`Grid`.

    Interior nodes carry the unknown; exterior nodes (box faces and halo)
    carry sampled boundary data.  Values are immutable after construction.
    """

    __slots__ = ("grid", "values", "exterior_rule")

    def __init__(self, grid: Grid, values: np.ndarray, exterior_rule=None):
        values = np.array(values, dtype=float)
        if values.shape != grid.shape:
            raise GridError(f"values shape {values.shape} does not match lattice shape {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise GridError("grid function values must all be finite")
        values.flags.writeable = False
        self.grid = grid
        self.values = values
        self.exterior_rule = exterior_rule

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_callable(cls, grid: Grid, fn) -> "GridFunction":
        """Sample ``fn`` on every lattice node. ``fn`` takes coordinate arrays."""
        vals = np.broadcast_to(np.asarray(fn(*grid.meshgrid()), dtype=float), grid.shape)
        return cls(grid, vals, exterior_rule=fn)

    @classmethod
    def from_interior(cls, grid: Grid, interior_values, exterior_rule) -> "GridFunction":
        """Combine interior values with boundary data sampled once from ``exterior_rule``."""
        vals = np.broadcast_to(np.asarray(exterior_rule(*grid.meshgrid()), dtype=float), grid.shape).copy()
        interior_values = np.asarray(interior_values, dtype=float)
        target = vals[grid.interior_slices()]
        if interior_values.shape != target.shape:
            raise GridError(f"interior values shape {interior_values.shape}, expected {target.shape}")
        vals[grid.interior_slices()] = interior_values
        return cls(grid, vals, exterior_rule=exterior_rule)

    @classmethod
    def from_values(cls, grid: Grid, values) -> "GridFunction":
        return cls(grid, values)

    # -- access ---------------------------------------------------------------

    @property
    def interior_values(self) -> np.ndarray:
        return self.values[self.grid.interior_slices()]

    def value(self, node) -> float:
        return float(self.values[self.grid._node(node)])

    def sample(self, point) -> float:
        """Value at an arbitrary point of the lattice hull.

        On-lattice points (within ``LATTICE_SNAP * h`` per axis) return the
        stored value bit-for-bit; other points use multilinear interpolation.
        """
        point = np.atleast_1d(np.asarray(point, dtype=float))
        g = self.grid
        base = []
        frac = []
        for k in range(g.dim):
            s = (point[k] - g.box[k][0]) / g.h + g.halo_steps
            j = round(s)
            if abs(s - j) <= LATTICE_SNAP and 0 <= j < g.shape[k]:
                base.append(int(j))
                frac.append(0.0)
                continue
            i = math.floor(s)
            if i < 0 or i + 1 > g.shape[k] - 1:
                raise ReachError(f"point {point} leaves the stored lattice on axis {k}")
            base.append(int(i))
            frac.append(s - i)
        if g.dim == 1:
            i, t = base[0], frac[0]
            if t == 0.0:
                return float(self.values[i])
            return float((1.0 - t) * self.values[i] + t * self.values[i + 1])
        (i, j), (t, s) = base, frac
        v = self.values
        if t == 0.0 and s == 0.0:
            return float(v[i, j])
        if t == 0.0:
            return float((1.0 - s) * v[i, j] + s * v[i, j + 1])
        if s == 0.0:
            return float((1.0 - t) * v[i, j] + t * v[i + 1, j])
        return float(
            (1.0 - t) * ((1.0 - s) * v[i, j] + s * v[i, j + 1])
            + t * ((1.0 - s) * v[i + 1, j] + s * v[i + 1, j + 1])
        )

    def __neg__(self) -> "GridFunction":
        return GridFunction(self.grid, -self.values)

    # -- serialization -------------------------------------------------------

    def to_csv(self, path) -> None:
        """One row per node: coordinates, value, interior flag."""
        g = self.grid
        mask = g.interior_mask()
        mesh = g.meshgrid()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{k + 1}" for k in range(g.dim)] + ["value", "interior_flag"])
            it = np.ndindex(g.shape)
            for idx in it:
                row = [f"{mesh[k][idx]:.17g}" for k in range(g.dim)]
                row.append(f"{self.values[idx]:.17g}")
                row.append("1" if mask[idx] else "0")
                writer.writerow(row)


@dataclass(frozen=True)
class Jet:
    """Second-order expansion data (gradient, Hessian) at a node.

    The Hessian is symmetrized on construction.
    """

    p: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if X.shape != (p.size, p.size):
            raise GridError(f"Hessian shape {X.shape} incompatible with gradient of size {p.size}")
        X = 0.5 * (X + X.T)
        p.flags.writeable = False
        X.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "X", X)


def discrete_jet(u: GridFunction, node) -> Jet:
    """Central-difference gradient and second-difference Hessian at ``node``.

    Requires all stencil neighbors (axis and, in 2-d, corner) to exist on the
    lattice; exact on quadratic polynomials.
    """
    g = u.grid
    node = g._node(node)
    h = g.h
    for k in range(g.dim):
        for step in (-1, 1):
            j = node[k] + step
            if not (0 <= j < g.shape[k]):
                missing = list(node)
                missing[k] = j
                raise GridError(f"discrete_jet at {node}: missing neighbor {tuple(missing)}")
    v = u.values
    if g.dim == 1:
        (i,) = node
        p = np.array([(v[i + 1] - v[i - 1]) / (2 * h)])
        X = np.array([[(v[i + 1] - 2 * v[i] + v[i - 1]) / (h * h)]])
        return Jet(p, X)
    i, j = node
    p = np.array([(v[i + 1, j] - v[i - 1, j]) / (2 * h), (v[i, j + 1] - v[i, j - 1]) / (2 * h)])
    d11 = (v[i + 1, j] - 2 * v[i, j] + v[i - 1, j]) / (h * h)
    d22 = (v[i, j + 1] - 2 * v[i, j] + v[i, j - 1]) / (h * h)
    d12 = (v[i + 1, j + 1] - v[i + 1, j - 1] - v[i - 1, j + 1] + v[i - 1, j - 1]) / (4 * h * h)
    return Jet(p, np.array([[d11, d12], [d12, d22]]))


def interior_jets(u: GridFunction) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized jets at every interior node.

    Returns ``(p, X)`` with ``p`` of shape ``(*interior_shape, dim)`` and
    ``X`` of shape ``(*interior_shape, dim, dim)``.
    """
    g = u.grid
    h = g.h
    v = u.values
    sl = g.interior_slices()

    def shifted(*steps):
        return v[tuple(slice(s.start + d, s.stop + d) for s, d in zip(sl, steps))]

    if g.dim == 1:
        c = v[sl]
        p = (shifted(1) - shifted(-1)) / (2 * h)
        X = (shifted(1) - 2 * c + shifted(-1)) / (h * h)
        return p[..., None], X[..., None, None]
    c = v[sl]
    p1 = (shifted(1, 0) - shifted(-1, 0)) / (2 * h)
    p2 = (shifted(0, 1) - shifted(0, -1)) / (2 * h)
    d11 = (shifted(1, 0) - 2 * c + shifted(-1, 0)) / (h * h)
    d22 = (shifted(0, 1) - 2 * c + shifted(0, -1)) / (h * h)
    d12 = (shifted(1, 1) - shifted(1, -1) - shifted(-1, 1) + shifted(-1, -1)) / (4 * h * h)
    p = np.stack([p1, p2], axis=-1)
    X = np.stack(
        [np.stack([d11, d12], axis=-1), np.stack([d12, d22], axis=-1)],
        axis=-2,
    )
    return p, X


def is_matrix_ordered(X, Y, tol: float = 0.0) -> bool:
    """True iff ``X <= Y`` in the semidefinite order, up to ``tol``.

    Checks that the smallest eigenvalue of ``Y - X`` is at least ``-tol``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape != Y.shape or X.shape[0] != X.shape[1]:
        raise ValueError(f"matrix shapes {X.shape} and {Y.shape} are not comparable")
    diff = 0.5 * ((Y - X) + (Y - X).T)
    return bool(np.linalg.eigvalsh(diff)[0] >= -tol)
