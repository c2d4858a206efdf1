"""Quadratic-penalty envelopes (sup- and inf-convolution) and their certificates.

The sup-convolution of a grid function u with parameter r is the discrete
maximum over all lattice nodes y (interior and halo) of

    u(y) - |x - y|^2 / (2 r^2),

computed at every lattice node x.  Two interchangeable implementations are
provided: a brute-force separable pass (max over every source per axis) and a
lower-envelope pass that localizes the maximizing source and re-maximizes
exactly over the localized window.  Both evaluate identical per-candidate
expressions, so their outputs agree bit-for-bit; the test suite enforces this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GridError
from .grid import Grid, GridFunction

_ENVELOPE_METHODS = ("envelope", "brute")


@dataclass(frozen=True)
class MoreauParams:
    """Envelope parameter r and sup-norm bound M used for domain shrinking."""

    r: float
    M: float

    def __post_init__(self):
        if not self.r > 0:
            raise GridError(f"envelope parameter r must be positive, got {self.r}")
        if self.M < 0:
            raise GridError(f"sup-norm bound M must be nonnegative, got {self.M}")

    @property
    def shrink_distance(self) -> float:
        return math.sqrt(2.0 * self.M) * self.r


@dataclass(frozen=True)
class SemiconvexityReport:
    """Certificate that U + (c/2)|x|^2 has a positive-semidefinite discrete Hessian.

    ``worst_violation`` is the minimum over interior nodes of the smallest
    eigenvalue of that discrete Hessian; the certificate passes when it is
    at least ``-tol``.
    """

    constant: float
    worst_violation: float
    witness_node: tuple
    tol: float
    passed: bool

    def to_text(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"constant: {self.constant:.17g}\n")
            fh.write(f"worst_violation: {self.worst_violation:.17g}\n")
            fh.write(f"witness_node: {self.witness_node}\n")
            fh.write(f"tol: {self.tol:.17g}\n")
            fh.write(f"passed: {self.passed}\n")


# -- one-dimensional transforms ----------------------------------------------


def _brute_pass(f: np.ndarray, coords: np.ndarray, inv2r2: float) -> np.ndarray:
    d = coords[:, None] - coords[None, :]
    cand = f[None, :] - d * d * inv2r2
    return cand.max(axis=1)


def _envelope_pass(f: np.ndarray, coords: np.ndarray, inv2r2: float) -> np.ndarray:
    """Upper envelope of the parabolas ``f[j] - inv2r2 (x - coords[j])^2``.

    The hull scan finds, per target node, the segment of the exact upper
    envelope; the value is then the exact maximum over the contiguous source
    window spanned by the neighboring segments (plus the self source), which
    reproduces the brute-force float maximum.
    """
    n = f.size
    if n == 1:
        return f.copy()
    c = inv2r2
    # vertex heights in "lower envelope of (c v^2 - f)" form
    gg = c * coords * coords - f
    vtx = np.empty(n, dtype=int)
    rng = np.empty(n + 1, dtype=float)
    vtx[0] = 0
    rng[0] = -np.inf
    rng[1] = np.inf
    k = 0

    def intersect(q, r_):
        return (gg[q] - gg[r_]) / (2.0 * c * (coords[q] - coords[r_]))

    for qi in range(1, n):
        s = intersect(qi, vtx[k])
        while k > 0 and s <= rng[k]:
            k -= 1
            s = intersect(qi, vtx[k])
        k += 1
        vtx[k] = qi
        rng[k] = s
        rng[k + 1] = np.inf
    nseg = k + 1

    out = np.empty(n, dtype=float)
    k = 0
    for i in range(n):
        x = coords[i]
        while rng[k + 1] < x:
            k += 1
        lo = vtx[k - 1] if k > 0 else vtx[k]
        hi = vtx[k + 1] if k + 1 < nseg else vtx[k]
        lo = min(lo, i)
        hi = max(hi, i)
        d = x - coords[lo : hi + 1]
        out[i] = (f[lo : hi + 1] - d * d * inv2r2).max()
    return out


def _transform(values: np.ndarray, grid: Grid, r: float, method: str) -> np.ndarray:
    inv2r2 = 1.0 / (2.0 * r * r)
    passes = _brute_pass if method == "brute" else _envelope_pass
    out = values.astype(float, copy=True)
    if grid.dim == 1:
        return passes(out, grid.axis_coords(0), inv2r2)
    # separable: axis 0 first, then axis 1 (fixed order shared by both methods)
    c0, c1 = grid.axis_coords(0), grid.axis_coords(1)
    for j in range(out.shape[1]):
        out[:, j] = passes(out[:, j], c0, inv2r2)
    for i in range(out.shape[0]):
        out[i, :] = passes(out[i, :], c1, inv2r2)
    return out


def sup_convolution(u: GridFunction, r: float, method: str = "envelope") -> GridFunction:
    """Discrete sup-convolution ``max_y u(y) - |x - y|^2 / (2 r^2)`` over the lattice.

    Dominates u nodewise (the source y = x is always a candidate) and is
    semiconvex with constant ``1 / r^2``.
    """
    if not r > 0:
        raise GridError(f"envelope parameter r must be positive, got {r}")
    if method not in _ENVELOPE_METHODS:
        raise GridError(f"unknown method {method!r}, expected one of {_ENVELOPE_METHODS}")
    return GridFunction(u.grid, _transform(u.values, u.grid, r, method))


def inf_convolution(v: GridFunction, r: float, method: str = "envelope") -> GridFunction:
    """Discrete inf-convolution ``min_y v(y) + |x - y|^2 / (2 r^2)``.

    Implemented as ``-sup_convolution(-v, r)``; IEEE negation is exact, so the
    duality identity holds bit-for-bit.
    """
    return -sup_convolution(-v, r, method=method)


def shrunken_domain(grid: Grid, params: MoreauParams) -> list[tuple[int, ...]]:
    """Interior nodes farther than ``sqrt(2 M) r`` from the box boundary.

    May be empty; emptiness is a reported outcome, not an error.
    """
    cut = params.shrink_distance
    return [
        node
        for node in grid.interior_nodes()
        if grid.boundary_distance(grid.coords(node)) > cut
    ]


def _interior_hessian_min_eig(values: np.ndarray, grid: Grid) -> tuple[np.ndarray, tuple]:
    h2 = grid.h * grid.h
    sl = grid.interior_slices()

    def shifted(*steps):
        return values[tuple(slice(s.start + d, s.stop + d) for s, d in zip(sl, steps))]

    if grid.dim == 1:
        lam = (shifted(1) - 2 * values[sl] + shifted(-1)) / h2
    else:
        c = values[sl]
        d11 = (shifted(1, 0) - 2 * c + shifted(-1, 0)) / h2
        d22 = (shifted(0, 1) - 2 * c + shifted(0, -1)) / h2
        d12 = (shifted(1, 1) - shifted(1, -1) - shifted(-1, 1) + shifted(-1, -1)) / (4 * h2)
        half_tr = 0.5 * (d11 + d22)
        lam = half_tr - np.sqrt(0.25 * (d11 - d22) ** 2 + d12 * d12)
    flat = int(np.argmin(lam))
    witness_local = np.unravel_index(flat, lam.shape)
    witness = tuple(int(witness_local[k] + sl[k].start) for k in range(grid.dim))
    return lam, witness


def certify_semiconvex(U: GridFunction, c: float, tol: float = 1e-8) -> SemiconvexityReport:
    """Check that ``U + (c/2)|x|^2`` has PSD discrete Hessians on interior nodes."""
    if c < 0:
        raise GridError(f"semiconvexity constant must be nonnegative, got {c}")
    g = U.grid
    mesh = g.meshgrid()
    sq = sum(m * m for m in mesh)
    W = U.values + 0.5 * c * sq
    lam, witness = _interior_hessian_min_eig(W, g)
    worst = float(lam.min())
    return SemiconvexityReport(
        constant=float(c),
        worst_violation=worst,
        witness_node=witness,
        tol=float(tol),
        passed=bool(worst >= -tol),
    )


def certify_semiconcave(V: GridFunction, c: float, tol: float = 1e-8) -> SemiconvexityReport:
    """Mirror certificate: ``V - (c/2)|x|^2`` has NSD discrete Hessians."""
    return certify_semiconvex(-V, c, tol=tol)
