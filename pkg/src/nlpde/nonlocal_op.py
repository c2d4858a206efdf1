"""Compensated jump operators.

The basic evaluation at an interior node x with caller-supplied gradient p is

    I[u](x) = sum_j w_j * ( u(x + z_j) - u(x) - 1_{|z_j| <= 1} <z_j, p> ).

The gradient is always an explicit argument: inequalities pair the jump term
with a test function's gradient, never with a recomputed one.  Off-lattice
targets ``x + z`` are filled by multilinear interpolation; on-lattice targets
return stored values bit-for-bit, so lattice-aligned atoms are exact.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ReachError
from .grid import Grid, GridFunction, LATTICE_SNAP
from .levy import LevyQuadrature


def _check_dims(u: GridFunction, q: LevyQuadrature):
    if q.dim != u.grid.dim:
        raise ReachError(f"quadrature dimension {q.dim} does not match grid dimension {u.grid.dim}")


def _sample_or_reach_error(u: GridFunction, point, atom_index: int) -> float:
    try:
        return u.sample(point)
    except ReachError as exc:
        raise ReachError(
            f"atom {atom_index}: jump target {np.asarray(point)} leaves the stored lattice"
        ) from exc


def eval_nonlocal(u: GridFunction, x, p, q: LevyQuadrature) -> float:
    """Compensated jump sum at node ``x`` with explicit gradient ``p``.

    Small jumps (``|z| <= 1``) are compensated by ``<z, p>``; tail jumps are
    not.  Every target ``x + z_j`` must lie on the stored lattice hull.
    """
    _check_dims(u, q)
    g = u.grid
    x = g._node(x)
    xc = g.coords(x)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    ux = float(u.values[x])
    total = 0.0
    for j in range(q.n_atoms):
        z = q.z[j]
        up = _sample_or_reach_error(u, xc + z, j)
        if q.small[j]:
            term = up - ux - float(z @ p)
        else:
            term = up - ux
        total += q.w[j] * term
    return total


def eval_nonlocal_split(u: GridFunction, x, p, X, delta: float, eps: float, q: LevyQuadrature) -> float:
    """Jump sum with the small-jump branch replaced by its second-order model.

    Atoms with ``|z| <= eps`` contribute ``w * (0.5 <X z, z> + delta |z|^2)``;
    atoms with ``|z| > eps`` are evaluated directly as in :func:`eval_nonlocal`.
    ``eps`` must lie in (0, 1].  A negative ``delta`` realizes the mirrored
    (supersolution-side) matrix ``X - 2 |delta| I``.
    """
    _check_dims(u, q)
    if not (0.0 < eps <= 1.0):
        raise ReachError(f"split radius eps must lie in (0, 1], got {eps}")
    g = u.grid
    x = g._node(x)
    xc = g.coords(x)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ux = float(u.values[x])
    total = 0.0
    for j in range(q.n_atoms):
        z = q.z[j]
        znorm = math.sqrt(float(z @ z))
        if znorm <= eps:
            z2 = float(z @ z)
            total += q.w[j] * (0.5 * float(z @ (X @ z)) + delta * z2)
        else:
            up = _sample_or_reach_error(u, xc + z, j)
            if q.small[j]:
                term = up - ux - float(z @ p)
            else:
                term = up - ux
            total += q.w[j] * term
    return total


def eval_nonlocal_restricted(u: GridFunction, x, p, q: LevyQuadrature, region: Grid) -> float:
    """Compensated jump sum restricted to targets inside the closed box of ``region``.

    Atoms whose target ``x + z_j`` leaves the closure are skipped, not errors.
    Equals :func:`eval_nonlocal` when every target stays inside.
    """
    _check_dims(u, q)
    g = u.grid
    x = g._node(x)
    xc = g.coords(x)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    ux = float(u.values[x])
    total = 0.0
    for j in range(q.n_atoms):
        z = q.z[j]
        target = xc + z
        if not region.in_closure(target):
            continue
        up = _sample_or_reach_error(u, target, j)
        if q.small[j]:
            term = up - ux - float(z @ p)
        else:
            term = up - ux
        total += q.w[j] * term
    return total


def interpolation_report(grid: Grid, q: LevyQuadrature) -> dict:
    """Diagnostic for off-lattice atoms.

    Interpolated targets carry an O(h^2) error per atom; the report gives the
    count of off-lattice atoms, their total weight, and the h^2 scale.
    """
    off = 0
    off_weight = 0.0
    for j in range(q.n_atoms):
        aligned = True
        for k in range(grid.dim):
            s = q.z[j][k] / grid.h
            if abs(s - round(s)) > LATTICE_SNAP:
                aligned = False
                break
        if not aligned:
            off += 1
            off_weight += float(q.w[j])
    return {
        "off_lattice_atoms": off,
        "off_lattice_weight": off_weight,
        "h2_error_scale": off_weight * grid.h ** 2,
    }


class ShiftTable:
    """Precomputed lattice shifts for evaluating ``u(x + z_j)`` on all interior nodes.

    On a uniform lattice the offset ``z / h`` is node-independent, so each atom
    becomes a fixed combination of at most ``2^dim`` shifted array slices.
    Construction fails if the halo cannot absorb the largest jump.
    """

    def __init__(self, grid: Grid, q: LevyQuadrature):
        _check_dims_grid(grid, q)
        if q.max_jump > grid.halo_radius + LATTICE_SNAP * grid.h:
            raise ReachError(
                f"largest jump {q.max_jump} exceeds halo_radius {grid.halo_radius}; "
                "rebuild the grid with a wider halo"
            )
        self.grid = grid
        self.q = q
        self._shifts = []  # per atom: list of (offset tuple, weight) corners
        sl = grid.interior_slices()
        for j in range(q.n_atoms):
            corners = [((0,) * grid.dim, 1.0)]
            for k in range(grid.dim):
                s = q.z[j][k] / grid.h
                i = round(s)
                if abs(s - i) <= LATTICE_SNAP:
                    steps = [(int(i), 1.0)]
                else:
                    i = math.floor(s)
                    t = s - i
                    steps = [(int(i), 1.0 - t), (int(i) + 1, t)]
                corners = [
                    (off + (step,), wgt * swgt)
                    for off, wgt in corners
                    for step, swgt in steps
                ]
            for off, _ in corners:
                for k in range(grid.dim):
                    lo = sl[k].start + off[k]
                    hi = sl[k].stop + off[k]
                    if lo < 0 or hi > grid.shape[k]:
                        raise ReachError(f"atom {j}: jump leaves the stored lattice on axis {k}")
            self._shifts.append(corners)
        # compensator vector: sum of w z over small atoms
        self.small_drift = (q.w[q.small, None] * q.z[q.small]).sum(axis=0)
        self.total_weight = float(q.w.sum())

    def shifted_values(self, values: np.ndarray, j: int) -> np.ndarray:
        """Array of ``u(x + z_j)`` over interior nodes."""
        sl = self.grid.interior_slices()
        out = None
        for off, wgt in self._shifts[j]:
            block = values[tuple(slice(s.start + o, s.stop + o) for s, o in zip(sl, off))]
            if len(self._shifts[j]) == 1:
                return block  # aligned atom: exact stored values
            out = wgt * block if out is None else out + wgt * block
        return out

    def apply(self, u: GridFunction, p: np.ndarray) -> np.ndarray:
        """Vectorized ``I[u]`` on interior nodes; ``p`` has shape (*interior, dim)."""
        vals = u.values
        interior = vals[self.grid.interior_slices()]
        out = np.zeros_like(interior)
        for j in range(self.q.n_atoms):
            out += self.q.w[j] * self.shifted_values(vals, j)
        out -= self.total_weight * interior
        out -= (p * self.small_drift).sum(axis=-1)
        return out


def _check_dims_grid(grid: Grid, q: LevyQuadrature):
    if q.dim != grid.dim:
        raise ReachError(f"quadrature dimension {q.dim} does not match grid dimension {grid.dim}")
