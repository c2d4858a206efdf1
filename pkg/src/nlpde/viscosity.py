"""Residuals of the approximate sub/supersolution inequalities and the
doubling-of-variables verification engine.

The operator family is proper and degenerate elliptic:

    F(x, r, p, X) = lam * r - trace(a(x) X) + H(x, p) - f(x),

with lam > 0, a(x) positive semidefinite, H continuous in p.  A subsolution
check at slack nu means ``sub_residual <= nu``; a supersolution check means
``super_residual >= -nu``.

The doubling engine maximizes Phi(x, y) = U(x) - V(y) - alpha |x - y|^2 over
a product window of node pairs, then draws shrinking random linear tilts and
re-maximizes exhaustively, emitting one verified witness per step: matching
points, one-sided jets, the tilt vector, and the validity radius of the
second-order bounds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridError, JetBoundError, VerificationFinding
from .grid import Grid, GridFunction, Jet, discrete_jet, is_matrix_ordered, LATTICE_SNAP
from .levy import LevyQuadrature
from .moreau import MoreauParams, shrunken_domain, sup_convolution
from .nonlocal_op import eval_nonlocal_split

DEFAULT_BOUND_TOL = 1e-12
DEFAULT_ORDER_TOL = 1e-9
DEFAULT_KEY_TOL = 1e-8
DEFAULT_DELTA0 = 0.1
# per-step shrink factor of the tilt radius; at most 1/2 is admissible for
# interiority, 1/4 keeps the tilt below the delta slack of the jet bounds
DEFAULT_TILT_DECAY = 0.25


# ---------------------------------------------------------------------------
# operator family
# ---------------------------------------------------------------------------


class FSpec:
    """Proper degenerate-elliptic operator data.

    Args:
        lam: properness rate, must be positive.
        a: diffusion; scalar, per-axis diagonal, constant symmetric matrix,
           or callable mapping points of shape (M, dim) to any of those shapes.
        H: first-order term, callable ``H(points, p) -> (M,)`` or None.
        f: source; scalar or callable ``f(points) -> (M,)``.
    """

    def __init__(self, lam: float, a=0.0, H=None, f=0.0):
        if not (np.isfinite(lam) and lam > 0):
            raise ValueError(f"properness requires lam > 0, got {lam}")
        self.lam = float(lam)
        self.a = a
        self.H = H
        self.f = f

    def diffusion_at(self, points: np.ndarray) -> np.ndarray:
        """Diffusion matrices at each point, shape (M, dim, dim); PSD-checked."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        m, dim = points.shape
        a = self.a(points) if callable(self.a) else self.a
        a = np.asarray(a, dtype=float)
        if a.ndim == 0:
            out = np.zeros((m, dim, dim))
            out[:, range(dim), range(dim)] = a
        elif a.shape == (dim,):
            out = np.zeros((m, dim, dim))
            out[:, range(dim), range(dim)] = a[None, :]
        elif a.shape == (dim, dim):
            out = np.broadcast_to(a, (m, dim, dim)).copy()
        elif a.shape == (m,):
            out = np.zeros((m, dim, dim))
            out[:, range(dim), range(dim)] = a[:, None]
        elif a.shape == (m, dim):
            out = np.zeros((m, dim, dim))
            out[:, range(dim), range(dim)] = a
        elif a.shape == (m, dim, dim):
            out = a.copy()
        else:
            raise ValueError(f"diffusion shape {a.shape} not understood for {m} points in {dim}-d")
        out = 0.5 * (out + np.swapaxes(out, -1, -2))
        eigs = np.linalg.eigvalsh(out)
        scale = 1.0 + float(np.abs(out).max(initial=0.0))
        if eigs.min(initial=0.0) < -1e-10 * scale:
            bad = int(np.argmin(eigs.min(axis=-1)))
            raise ValueError(f"diffusion field is not PSD at point {points[bad]}")
        return out

    def source_at(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if callable(self.f):
            return np.broadcast_to(np.asarray(self.f(points), dtype=float), (points.shape[0],)).copy()
        return np.full(points.shape[0], float(self.f))

    def drift_at(self, points: np.ndarray, p: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.H is None:
            return np.zeros(points.shape[0])
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return np.broadcast_to(np.asarray(self.H(points, p), dtype=float), (points.shape[0],)).copy()

    def value(self, point, r: float, p, X) -> float:
        """F(x, r, p, X) at a single point."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        amat = self.diffusion_at(point[None, :])[0]
        out = self.lam * r - float(np.trace(amat @ X))
        out += float(self.drift_at(point[None, :], p[None, :])[0])
        out -= float(self.source_at(point[None, :])[0])
        return out


# ---------------------------------------------------------------------------
# one-sided second-order bounds on lattice balls
# ---------------------------------------------------------------------------


def _lattice_ball(grid: Grid, node, radius: float):
    """Lattice offsets z (coordinates) with 0 < |z| <= radius and node + z stored.

    Returns (offsets, index_steps): arrays of shape (M, dim) and (M, dim).
    """
    node = grid._node(node)
    h = grid.h
    kmax = int(math.floor(radius / h + LATTICE_SNAP))
    if kmax < 1:
        return np.zeros((0, grid.dim)), np.zeros((0, grid.dim), dtype=int)
    ranges = []
    for k in range(grid.dim):
        lo = -min(kmax, node[k])
        hi = min(kmax, grid.shape[k] - 1 - node[k])
        ranges.append(np.arange(lo, hi + 1))
    if grid.dim == 1:
        steps = ranges[0][:, None]
    else:
        A, B = np.meshgrid(ranges[0], ranges[1], indexing="ij")
        steps = np.column_stack([A.ravel(), B.ravel()])
    z = steps * h
    norms = np.sqrt((z * z).sum(axis=1))
    keep = (norms > 0) & (norms <= radius + LATTICE_SNAP * h)
    return z[keep], steps[keep]


def jet_bound_violation(w: GridFunction, node, p, X, delta: float, radius: float, side: str):
    """Worst residual of the one-sided second-order bound over the lattice ball.

    ``side="sub"`` checks  w(x+z) <= w(x) + <p,z> + 0.5 <Xz,z> + delta |z|^2;
    ``side="super"`` checks w(x+z) >= w(x) + <p,z> + 0.5 <Xz,z> - delta |z|^2.
    Returns ``(worst, witness_z)`` with ``worst <= 0`` meaning the bound holds.
    """
    g = w.grid
    node = g._node(node)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z, steps = _lattice_ball(g, node, radius)
    if len(z) == 0:
        return -np.inf, None
    wx = float(w.values[node])
    idx = tuple(np.asarray(node)[None, :].T + steps.T)
    wz = w.values[idx]
    quad = 0.5 * np.einsum("mi,ij,mj->m", z, X, z)
    z2 = (z * z).sum(axis=1)
    model = wx + z @ p + quad
    if side == "sub":
        resid = wz - (model + delta * z2)
    else:
        resid = (model - delta * z2) - wz
    worst = int(np.argmax(resid))
    return float(resid[worst]), z[worst]


def sub_residual(
    u: GridFunction,
    x,
    jet: Jet,
    F: FSpec,
    q: LevyQuadrature,
    eps: float,
    delta: float,
    *,
    check_bound: bool = True,
    bound_tol: float = DEFAULT_BOUND_TOL,
) -> float:
    """Residual of the approximate subsolution inequality at node ``x``.

    Value: ``F(x, u(x), p, X) - split jump sum`` with the small-jump branch
    modeled by ``0.5 <(X + 2 delta I) z, z>`` on ``|z| <= eps``.  A verdict
    "subsolution at slack nu" means the residual is at most nu.
    """
    if not (0.0 < eps <= 1.0):
        raise GridError(f"eps must lie in (0, 1], got {eps}")
    if delta < 0:
        raise GridError(f"delta must be nonnegative, got {delta}")
    if check_bound:
        worst, witness = jet_bound_violation(u, x, jet.p, jet.X, delta, eps, "sub")
        if worst > bound_tol:
            raise JetBoundError(
                f"one-sided upper bound fails at offset {witness} (residual {worst:.3e})",
                witness=witness,
                residual=worst,
            )
    g = u.grid
    node = g._node(x)
    fval = F.value(g.coords(node), float(u.values[node]), jet.p, jet.X)
    return fval - eval_nonlocal_split(u, node, jet.p, jet.X, delta, eps, q)


def super_residual(
    v: GridFunction,
    x,
    jet: Jet,
    F: FSpec,
    q: LevyQuadrature,
    eps: float,
    delta: float,
    *,
    check_bound: bool = True,
    bound_tol: float = DEFAULT_BOUND_TOL,
) -> float:
    """Mirror of :func:`sub_residual`; supersolution verdict is residual >= -nu.

    The small-jump branch uses the matrix ``X - 2 delta I``.
    """
    if not (0.0 < eps <= 1.0):
        raise GridError(f"eps must lie in (0, 1], got {eps}")
    if delta < 0:
        raise GridError(f"delta must be nonnegative, got {delta}")
    if check_bound:
        worst, witness = jet_bound_violation(v, x, jet.p, jet.X, delta, eps, "super")
        if worst > bound_tol:
            raise JetBoundError(
                f"one-sided lower bound fails at offset {witness} (residual {worst:.3e})",
                witness=witness,
                residual=worst,
            )
    g = v.grid
    node = g._node(x)
    fval = F.value(g.coords(node), float(v.values[node]), jet.p, jet.X)
    return fval - eval_nonlocal_split(v, node, jet.p, jet.X, -delta, eps, q)


# ---------------------------------------------------------------------------
# doubling of variables over a product window
# ---------------------------------------------------------------------------


class PairWindow:
    """Node pairs (x, y) of one grid inside a closed product box.

    The discrete boundary is the extremal index ring of the window; the
    interior is everything else.  Pairs are ordered lexicographically
    (x block first), which fixes all argmax tie-breaking.
    """

    def __init__(self, grid: Grid, x_box, y_box):
        self.grid = grid
        self.x_ranges = self._axis_ranges(grid, x_box, "x")
        self.y_ranges = self._axis_ranges(grid, y_box, "y")

    @staticmethod
    def _axis_ranges(grid: Grid, box, label: str):
        box = np.atleast_2d(np.asarray(box, dtype=float))
        if box.shape != (grid.dim, 2):
            raise GridError(f"{label}-window box must give (lo, hi) per axis, got shape {box.shape}")
        ranges = []
        tol = LATTICE_SNAP * grid.h
        for k in range(grid.dim):
            coords = grid.axis_coords(k)
            inside = np.nonzero((coords >= box[k, 0] - tol) & (coords <= box[k, 1] + tol))[0]
            if inside.size < 3:
                raise GridError(f"{label}-window axis {k} holds {inside.size} nodes; need >= 3 for an interior")
            ranges.append((int(inside[0]), int(inside[-1])))
        return ranges

    def _axis_nodes(self, ranges):
        spans = [np.arange(lo, hi + 1) for lo, hi in ranges]
        if self.grid.dim == 1:
            return spans[0][:, None]
        A, B = np.meshgrid(spans[0], spans[1], indexing="ij")
        return np.column_stack([A.ravel(), B.ravel()])

    def x_nodes(self) -> np.ndarray:
        """Index tuples of the x block, shape (Mx, dim), lexicographic."""
        return self._axis_nodes(self.x_ranges)

    def y_nodes(self) -> np.ndarray:
        return self._axis_nodes(self.y_ranges)

    @staticmethod
    def _edge_mask(nodes: np.ndarray, ranges) -> np.ndarray:
        mask = np.zeros(len(nodes), dtype=bool)
        for k, (lo, hi) in enumerate(ranges):
            mask |= (nodes[:, k] == lo) | (nodes[:, k] == hi)
        return mask

    def masks(self):
        """(interior, boundary) masks over the pair matrix (Mx, My)."""
        ex = self._edge_mask(self.x_nodes(), self.x_ranges)
        ey = self._edge_mask(self.y_nodes(), self.y_ranges)
        boundary = ex[:, None] | ey[None, :]
        return ~boundary, boundary

    def contains_pair(self, x_node, y_node, *, interior: bool = False) -> bool:
        shift = 1 if interior else 0
        for k in range(self.grid.dim):
            lo, hi = self.x_ranges[k]
            if not (lo + shift <= x_node[k] <= hi - shift):
                return False
            lo, hi = self.y_ranges[k]
            if not (lo + shift <= y_node[k] <= hi - shift):
                return False
        return True

    def diameter(self) -> float:
        total = 0.0
        for lo, hi in self.x_ranges + self.y_ranges:
            total += ((hi - lo) * self.grid.h) ** 2
        return math.sqrt(total)

    def point_pairs(self):
        """Coordinates of all pairs: arrays (Mx, dim) and (My, dim)."""
        xs = self.x_nodes()
        ys = self.y_nodes()
        cx = np.column_stack([self.grid.axis_coords(k)[xs[:, k]] for k in range(self.grid.dim)])
        cy = np.column_stack([self.grid.axis_coords(k)[ys[:, k]] for k in range(self.grid.dim)])
        return cx, cy


@dataclass(frozen=True)
class DoublingPoint:
    """Exhaustive maximizer of Phi(x, y) = U(x) - V(y) - alpha |x - y|^2."""

    x_node: tuple
    y_node: tuple
    alpha: float
    phi_max: float
    mu: float
    window: PairWindow = field(compare=False, repr=False)


def _phi_matrix(U: GridFunction, V: GridFunction, alpha: float, window: PairWindow):
    xs = window.x_nodes()
    ys = window.y_nodes()
    cx, cy = window.point_pairs()
    Ux = U.values[tuple(xs.T)]
    Vy = V.values[tuple(ys.T)]
    d2 = ((cx[:, None, :] - cy[None, :, :]) ** 2).sum(axis=-1)
    return Ux[:, None] - Vy[None, :] - alpha * d2, xs, ys


def doubling_maximize(U: GridFunction, V: GridFunction, alpha: float, window: PairWindow) -> DoublingPoint:
    """Exhaustive search of Phi over the window's interior pairs.

    ``mu`` is the gap between the interior maximum and the maximum over the
    discrete boundary ring; ``mu <= 0`` is a reported outcome, not an error.
    Ties break to the lexicographically smallest pair.
    """
    if not alpha > 0:
        raise GridError(f"penalty weight alpha must be positive, got {alpha}")
    if U.grid is not V.grid and U.grid != V.grid:
        raise GridError("doubling requires U and V on the same grid")
    phi, xs, ys = _phi_matrix(U, V, alpha, window)
    interior, boundary = window.masks()
    if not interior.any() or not boundary.any():
        raise GridError("window needs nonempty interior and boundary pair sets")
    masked = np.where(interior, phi, -np.inf)
    flat = int(np.argmax(masked))  # first max in C order = lexicographic tie-break
    ix, iy = np.unravel_index(flat, phi.shape)
    phi_max = float(phi[ix, iy])
    boundary_max = float(phi[boundary].max())
    return DoublingPoint(
        x_node=tuple(int(v) for v in xs[ix]),
        y_node=tuple(int(v) for v in ys[iy]),
        alpha=float(alpha),
        phi_max=phi_max,
        mu=phi_max - boundary_max,
        window=window,
    )


# ---------------------------------------------------------------------------
# perturbed maxima
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbedMax:
    """One verified witness of the perturbed-maximum construction.

    ``P`` is the tilt vector ``(p - p_ref, -(pp - p_ref))`` of length 2*dim;
    the one-sided second-order bounds hold with slack ``delta`` for every
    lattice offset of norm at most ``eps`` (vacuously when ``eps < h``).
    """

    m: int
    x_node: tuple
    y_node: tuple
    p: np.ndarray
    pp: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    P: np.ndarray
    eps: float
    delta: float
    p_ref: np.ndarray
    tilt_radius: float
    phi_m_max: float


def _draw_in_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    vec = rng.standard_normal(dim)
    norm = float(np.sqrt(vec @ vec))
    if norm == 0.0:
        vec = np.ones(dim)
        norm = float(np.sqrt(vec @ vec))
    scale = radius * rng.uniform() ** (1.0 / dim)
    return vec * (scale / norm)


def _largest_valid_radius(U, V, x_node, y_node, p, pp, X, Y, delta, cap, bound_tol):
    """Largest lattice-offset norm <= cap below which both one-sided bounds hold."""
    g = U.grid
    z, _ = _lattice_ball(g, x_node, cap)
    zy, _ = _lattice_ball(g, y_node, cap)
    # both sides must be checkable: restrict to the common reach
    norms_available = min(
        (np.inf if len(z) == 0 else np.inf),
    )
    # evaluate residuals on each side over its own ball, then merge by norm
    def side_resid(w, node, grad, hess, sign):
        zz, steps = _lattice_ball(g, node, cap)
        if len(zz) == 0:
            return zz[:, :1].ravel(), zz[:, :1].ravel()
        wx = float(w.values[g._node(node)])
        idx = tuple(np.asarray(g._node(node))[None, :].T + steps.T)
        wz = w.values[idx]
        quad = 0.5 * np.einsum("mi,ij,mj->m", zz, hess, zz)
        z2 = (zz * zz).sum(axis=1)
        model = wx + zz @ grad + quad
        if sign > 0:
            resid = wz - (model + delta * z2)
        else:
            resid = (model - delta * z2) - wz
        return np.sqrt(z2), resid

    norms_u, resid_u = side_resid(U, x_node, p, X, +1)
    norms_v, resid_v = side_resid(V, y_node, pp, Y, -1)
    norms = np.concatenate([norms_u, norms_v])
    resid = np.concatenate([resid_u, resid_v])
    if len(norms) == 0:
        return 0.5 * g.h  # vacuous positive radius
    order = np.argsort(norms, kind="stable")
    norms = norms[order]
    resid = np.maximum.accumulate(resid[order])
    ok = resid <= bound_tol
    if not ok.any():
        return 0.5 * g.h
    last = int(np.nonzero(ok)[0][-1])
    # valid up to (and including) norms[last] only if everything before holds
    if not ok[: last + 1].all():
        last = int(np.nonzero(~ok)[0][0]) - 1
        if last < 0:
            return 0.5 * g.h
    return float(norms[last])


def jensen_sequence(
    U: GridFunction,
    V: GridFunction,
    point: DoublingPoint,
    count: int,
    *,
    seed: int | None = 0,
    rng: np.random.Generator | None = None,
    delta0: float = DEFAULT_DELTA0,
    tilt_decay: float = DEFAULT_TILT_DECAY,
    order_tol: float = DEFAULT_ORDER_TOL,
    bound_tol: float = DEFAULT_BOUND_TOL,
) -> list[PerturbedMax]:
    """Shrinking random tilts of Phi with exhaustive re-maximization.

    For m = 1..count draws a tilt ``P_m`` of norm at most
    ``min(mu / (2 diam O), delta0 * h) * tilt_decay^m``, locates the exact
    maximizer of ``Phi_m = Phi - <P_m, (x, y)>`` over the window, and emits a
    witness with gradients ``p_ref + tilt`` consistent with the maximum
    property, central-difference Hessians (checked ordered), and the largest
    radius on which the one-sided bounds hold with slack ``delta0 * 2^-m``.

    Failures raise :class:`VerificationFinding` naming the clause; they are
    findings, not crashes.
    """
    if count < 0:
        raise GridError(f"count must be nonnegative, got {count}")
    if point.mu <= 0:
        raise GridError(f"perturbed maxima need a positive boundary gap, got mu={point.mu}")
    if not (0.0 < tilt_decay <= 0.5):
        raise GridError(f"tilt_decay must lie in (0, 1/2], got {tilt_decay}")
    if rng is None:
        rng = np.random.default_rng(seed)
    g = U.grid
    window = point.window
    alpha = point.alpha
    phi, xs, ys = _phi_matrix(U, V, alpha, window)
    interior, _ = window.masks()
    cx, cy = window.point_pairs()
    rho0 = min(point.mu / (2.0 * window.diameter()), delta0 * g.h)
    out = []
    radius = rho0
    for m in range(1, count + 1):
        radius = rho0 * tilt_decay ** m
        delta_m = delta0 * 0.5 ** m
        P = _draw_in_ball(rng, 2 * g.dim, radius)
        xi, eta = P[: g.dim], P[g.dim :]
        tilt = cx @ xi
        tilt_y = cy @ eta
        phi_m = phi - tilt[:, None] - tilt_y[None, :]
        flat = int(np.argmax(phi_m))
        ix, iy = np.unravel_index(flat, phi_m.shape)
        if not interior[ix, iy]:
            raise VerificationFinding("perturbed maximum is interior", m,
                                      f"argmax pair {tuple(xs[ix])}, {tuple(ys[iy])} lies on the window boundary")
        x_node = tuple(int(v) for v in xs[ix])
        y_node = tuple(int(v) for v in ys[iy])
        p_ref = 2.0 * alpha * (g.coords(x_node) - g.coords(y_node))
        p = p_ref + xi
        pp = p_ref - eta
        X = discrete_jet(U, x_node).X
        Y = discrete_jet(V, y_node).X
        if not is_matrix_ordered(X, Y, order_tol):
            raise VerificationFinding("matrix order X <= Y", m,
                                      f"min eig of Y - X is {np.linalg.eigvalsh(Y - X)[0]:.3e}")
        gap_p = float(np.linalg.norm(p - p_ref))
        gap_pp = float(np.linalg.norm(pp - p_ref))
        tol_m = radius * (1.0 + 1e-9) + 1e-15
        if gap_p > tol_m or gap_pp > tol_m:
            raise VerificationFinding("gradients converge to 2 alpha (x - y)", m,
                                      f"gaps {gap_p:.3e}, {gap_pp:.3e} exceed {tol_m:.3e}")
        cap = min(1.0, _ball_reach(g, x_node), _ball_reach(g, y_node))
        eps_m = _largest_valid_radius(U, V, x_node, y_node, p, pp, X, Y, delta_m, cap, bound_tol)
        out.append(
            PerturbedMax(
                m=m,
                x_node=x_node,
                y_node=y_node,
                p=p,
                pp=pp,
                X=X,
                Y=Y,
                P=P,
                eps=float(eps_m),
                delta=float(delta_m),
                p_ref=p_ref,
                tilt_radius=float(radius),
                phi_m_max=float(phi_m[ix, iy]),
            )
        )
    return out


def _ball_reach(grid: Grid, node) -> float:
    node = grid._node(node)
    steps = min(min(node[k], grid.shape[k] - 1 - node[k]) for k in range(grid.dim))
    return steps * grid.h


@dataclass(frozen=True)
class KeyInequalityReport:
    """Worst margin of the pairwise jump inequality over admissible offsets."""

    worst_margin: float
    witness_z: np.ndarray | None
    n_offsets: int
    tol: float
    passed: bool


def check_key_inequality(
    U: GridFunction,
    V: GridFunction,
    pm: PerturbedMax,
    window: PairWindow,
    tol: float = DEFAULT_KEY_TOL,
) -> KeyInequalityReport:
    """Exhaustive scan of the inequality linking the two jump increments.

    For every lattice offset z keeping both shifted points inside the window
    interior, the margin

        [V(y+z) - V(y) - <pp, z>] - [U(x+z) - U(x) - <p, z>]

    must be at least ``-tol``.  The worst margin and its offset are reported;
    failure is a finding, not an error.
    """
    g = U.grid
    x_node = np.asarray(pm.x_node)
    y_node = np.asarray(pm.y_node)
    spans = []
    for k in range(g.dim):
        lo = max(window.x_ranges[k][0] + 1 - x_node[k], window.y_ranges[k][0] + 1 - y_node[k])
        hi = min(window.x_ranges[k][1] - 1 - x_node[k], window.y_ranges[k][1] - 1 - y_node[k])
        spans.append(np.arange(lo, hi + 1))
    if g.dim == 1:
        steps = spans[0][:, None]
    else:
        A, B = np.meshgrid(spans[0], spans[1], indexing="ij")
        steps = np.column_stack([A.ravel(), B.ravel()])
    z = steps * g.h
    ux = float(U.values[tuple(x_node)])
    vy = float(V.values[tuple(y_node)])
    uz = U.values[tuple((x_node[None, :] + steps).T)]
    vz = V.values[tuple((y_node[None, :] + steps).T)]
    lhs = uz - ux - z @ pm.p
    rhs = vz - vy - z @ pm.pp
    margin = rhs - lhs
    worst = int(np.argmin(margin))
    return KeyInequalityReport(
        worst_margin=float(margin[worst]),
        witness_z=z[worst],
        n_offsets=len(z),
        tol=float(tol),
        passed=bool(margin[worst] >= -tol),
    )


def perturbed_max_records_to_csv(records: list[PerturbedMax], path) -> None:
    """Per-witness CSV: points, gradients, Hessian entries, tilt, radii."""
    if not records:
        cols = ["m"]
    else:
        dim = records[0].p.size
        cols = ["m"]
        cols += [f"x{k + 1}" for k in range(dim)] + [f"y{k + 1}" for k in range(dim)]
        cols += [f"p{k + 1}" for k in range(dim)] + [f"pp{k + 1}" for k in range(dim)]
        cols += [f"X{i + 1}{j + 1}" for i in range(dim) for j in range(dim)]
        cols += [f"Y{i + 1}{j + 1}" for i in range(dim) for j in range(dim)]
        cols += [f"P{k + 1}" for k in range(2 * dim)]
        cols += ["eps", "delta", "tilt_radius", "phi_m_max"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rec in records:
            g = None
            row = [str(rec.m)]
            for arr in (rec.x_node, rec.y_node):
                row += [f"{c}" for c in arr]
            for arr in (rec.p, rec.pp, rec.X.ravel(), rec.Y.ravel(), rec.P):
                row += [f"{c:.17g}" for c in arr]
            row += [f"{rec.eps:.17g}", f"{rec.delta:.17g}", f"{rec.tilt_radius:.17g}", f"{rec.phi_m_max:.17g}"]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# restricted-domain residuals with a boundary (Neumann) branch
# ---------------------------------------------------------------------------


class BoxNormalField:
    """Outward unit normals on the faces of a box grid.

    Corner nodes are listed once per incident face, each with that face's
    normal; a box boundary is only piecewise smooth, so the candidate set is
    per-face by construction.
    """

    def __init__(self, grid: Grid):
        self.grid = grid

    def candidates(self) -> list[tuple[np.ndarray, np.ndarray]]:
        g = self.grid
        out = []
        if g.dim == 1:
            lo, hi = g.box[0]
            out.append((np.array([lo]), np.array([-1.0])))
            out.append((np.array([hi]), np.array([1.0])))
            return out
        ticks = [g.axis_coords(k)[g.halo_steps : g.halo_steps + g.intervals[k] + 1] for k in range(2)]
        for k in range(2):
            other = 1 - k
            for side, normal_sign in ((g.box[k][0], -1.0), (g.box[k][1], 1.0)):
                normal = np.zeros(2)
                normal[k] = normal_sign
                for t in ticks[other]:
                    pt = np.zeros(2)
                    pt[k] = side
                    pt[other] = t
                    out.append((pt.copy(), normal.copy()))
        return out


def neumann_residuals(
    w: GridFunction,
    x,
    jet: Jet,
    F: FSpec,
    q: LevyQuadrature,
    omega: Grid,
    n: BoxNormalField,
    rho: float,
    r: float,
    M: float,
    side: str,
) -> float:
    """Residual of the two-branch restricted-domain inequality at node ``x``.

    The first branch anchors the jump set at nearby points y of the closed
    box (jumps with ``y + z`` outside are dropped); the second branch tests
    the boundary-normal slope within the same ball.  ``side="sub"`` takes
    minima (slope term ``+rho``); ``side="super"`` takes maxima (``-rho``).
    Jump values ``w(x + z)`` falling off the stored lattice are skipped; use
    :func:`neumann_residual_report` to see how many.
    """
    return neumann_residual_report(w, x, jet, F, q, omega, n, rho, r, M, side)["residual"]


def neumann_residual_report(
    w: GridFunction,
    x,
    jet: Jet,
    F: FSpec,
    q: LevyQuadrature,
    omega: Grid,
    n: BoxNormalField,
    rho: float,
    r: float,
    M: float,
    side: str,
) -> dict:
    if side not in ("sub", "super"):
        raise GridError(f"side must be 'sub' or 'super', got {side!r}")
    if not rho > 0:
        raise GridError(f"rho must be positive, got {rho}")
    if not r > 0:
        raise GridError(f"r must be positive, got {r}")
    if M < 0:
        raise GridError(f"sup-norm bound M must be nonnegative, got {M}")
    g = w.grid
    node = g._node(x)
    xc = g.coords(node)
    p = jet.p
    wx = float(w.values[node])
    reach = math.sqrt(2.0 * M) * r
    tol = LATTICE_SNAP * g.h

    anchors = [omega.coords(nd) for nd in omega.closure_nodes()]
    anchors = [y for y in anchors if np.linalg.norm(xc - y) <= reach + tol]
    if not anchors:
        raise GridError(f"no anchor points of the closed box within reach {reach} of {xc}")

    skipped = 0
    terms = []
    for y in anchors:
        total = 0.0
        for j in range(q.n_atoms):
            z = q.z[j]
            if not omega.in_closure(y + z):
                continue
            try:
                wz = w.sample(xc + z)
            except Exception:
                skipped += 1
                continue
            if q.small[j]:
                total += q.w[j] * (wz - wx - float(z @ p))
            else:
                total += q.w[j] * (wz - wx)
        terms.append(-total)
    fval = F.value(xc, wx, jet.p, jet.X)
    if side == "sub":
        branch_jump = fval + min(terms)
    else:
        branch_jump = fval + max(terms)

    slope_vals = [
        float(nrm @ p) for (y, nrm) in n.candidates() if np.linalg.norm(xc - y) <= reach + tol
    ]
    if side == "sub":
        branch_slope = min(v + rho for v in slope_vals) if slope_vals else np.inf
        residual = min(branch_jump, branch_slope)
    else:
        branch_slope = max(v - rho for v in slope_vals) if slope_vals else -np.inf
        residual = max(branch_jump, branch_slope)
    return {
        "residual": float(residual),
        "jump_branch": float(branch_jump),
        "slope_branch": float(branch_slope),
        "n_anchors": len(anchors),
        "n_boundary_candidates": len(slope_vals),
        "skipped_jumps": skipped,
    }


# ---------------------------------------------------------------------------
# envelope residual curve
# ---------------------------------------------------------------------------


def envelope_residual_curve(
    u: GridFunction,
    F: FSpec,
    q: LevyQuadrature,
    r_list,
    *,
    delta: float = 0.0,
    eps: float | None = None,
) -> list[dict]:
    """Measured subsolution slack of the sup-convolution on shrunken domains.

    For each r the curve reports ``nu(r)``, the maximum of
    :func:`sub_residual` of ``u^r`` over the nodes farther than
    ``sqrt(2 M) r`` from the boundary, with ``M = max |u|`` on the closed
    box.  The slack is a measured output; no rate is asserted.
    """
    g = u.grid
    closure_idx = tuple(np.asarray(g.closure_nodes()).T)
    M = float(np.abs(u.values[closure_idx]).max())
    if eps is None:
        eps = 0.5 * min(g.h, float(np.sqrt((q.z * q.z).sum(axis=1)).min()), 1.0)
    rows = []
    for r in r_list:
        U = sup_convolution(u, r)
        nodes = shrunken_domain(g, MoreauParams(r=r, M=M))
        if not nodes:
            rows.append({"r": float(r), "nu": float("nan"), "n_nodes": 0, "M": M})
            continue
        worst = -np.inf
        for node in nodes:
            jet = discrete_jet(U, node)
            val = sub_residual(U, node, jet, F, q, eps, delta, check_bound=False)
            worst = max(worst, val)
        rows.append({"r": float(r), "nu": float(worst), "n_nodes": len(nodes), "M": M})
    return rows
