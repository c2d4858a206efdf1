"""Finite quadrature representations of jump measures.

A jump measure is approximated by finitely many atoms ``(z_j, w_j)`` with
positive weights.  Atoms with ``|z| <= 1`` are the small jumps (they get the
gradient compensator in the nonlocal operator); atoms with ``|z| > 1`` form
the tail.  The admissibility moments

    s2    = sum of w |z|^2 over small atoms,
    tmass = sum of w       over tail atoms,

are recorded at construction and kept consistent with the atom list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MeasureError

_MOMENT_RTOL = 1e-12


@dataclass(frozen=True)
class LevyQuadrature:
    """Atomic approximation of a jump measure.

    Attributes:
        z: atom locations, shape ``(n_atoms, dim)``.
        w: positive weights, shape ``(n_atoms,)``.
        small: boolean mask, True where ``|z| <= 1``.
        s2: second moment of the small-jump part.
        tmass: total mass of the tail part.
    """

    z: np.ndarray
    w: np.ndarray
    small: np.ndarray = field(init=False, compare=False)
    s2: float = field(init=False, compare=False)
    tmass: float = field(init=False, compare=False)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]  # flat input means 1-d atoms
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if z.ndim != 2 or z.shape[1] not in (1, 2):
            raise MeasureError(f"atom array must have shape (n, 1) or (n, 2), got {z.shape}")
        if w.shape != (z.shape[0],):
            raise MeasureError(f"weights shape {w.shape} does not match {z.shape[0]} atoms")
        if z.shape[0] == 0:
            raise MeasureError("empty atom set")
        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(w)):
            raise MeasureError("atoms and weights must be finite")
        if np.any(w <= 0):
            raise MeasureError("all weights must be strictly positive")
        norms = np.sqrt((z * z).sum(axis=1))
        if np.any(norms == 0):
            raise MeasureError("atom at z = 0 is not allowed")
        small = norms <= 1.0  # |z| = 1 counts as a small jump
        z = z.copy()
        w = w.copy()
        z.flags.writeable = False
        w.flags.writeable = False
        small.flags.writeable = False
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "small", small)
        object.__setattr__(self, "s2", float(np.sum(w[small] * norms[small] ** 2)))
        object.__setattr__(self, "tmass", float(np.sum(w[~small])))

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.z.shape[0]

    @property
    def max_jump(self) -> float:
        return float(np.sqrt((self.z * self.z).sum(axis=1)).max())

    @property
    def small_mass(self) -> float:
        """Total weight of the small-jump atoms (diagonal weight in schemes)."""
        return float(np.sum(self.w[self.small]))

    def scaled(self, c: float) -> "LevyQuadrature":
        """Same atoms with every weight multiplied by ``c > 0``."""
        if c <= 0:
            raise MeasureError(f"scale factor must be positive, got {c}")
        return LevyQuadrature(self.z, self.w * c)

    def moments_recomputed(self) -> tuple[float, float]:
        norms = np.sqrt((self.z * self.z).sum(axis=1))
        s2 = float(np.sum(self.w[self.small] * norms[self.small] ** 2))
        tm = float(np.sum(self.w[~self.small]))
        return s2, tm

    # -- text serialization: one atom per line, z components then weight ----

    def to_text(self, path) -> None:
        with open(path, "w") as fh:
            for zj, wj in zip(self.z, self.w):
                fh.write(" ".join(f"{c:.17g}" for c in zj) + f" {wj:.17g}\n")


def quadrature_from_text(path) -> LevyQuadrature:
    """Read an atom list: whitespace-separated z components then the weight."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise MeasureError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise MeasureError(f"{path}: empty atom set")
    width = len(rows[0])
    if width not in (2, 3) or any(len(r) != width for r in rows):
        raise MeasureError(f"{path}: every line needs {width - 1} z components and a weight")
    arr = np.asarray(rows, dtype=float)
    return LevyQuadrature(arr[:, :-1], arr[:, -1])


@dataclass(frozen=True)
class MeasureSpec:
    """Construction recipe for a jump-measure quadrature.

    ``kind="atomic"`` passes an explicit atom list through.  ``kind="radial"``
    lays midpoint-rule atoms for a density ``d(|z|)`` on the annulus
    ``r_min <= |z| <= r_max`` (per radial shell, and per angular sector when
    ``dim == 2``).  The inner cutoff ``r_min > 0`` is mandatory: mass inside
    the cutoff is dropped, and its size is the caller's truncation budget.
    """

    kind: str
    atoms: tuple | None = None  # (z, w) arrays for kind="atomic"
    r_min: float = 0.0
    r_max: float = 0.0
    n_radial: int = 0
    n_angular: int = 16
    dim: int = 1
    density_fn: object = None

    def __post_init__(self):
        if self.kind not in ("atomic", "radial"):
            raise MeasureError(f"unknown measure kind {self.kind!r}")
        if self.kind == "atomic":
            if self.atoms is None:
                raise MeasureError("atomic spec needs an (z, w) atom list")
        else:
            if self.density_fn is None:
                raise MeasureError("radial spec needs a density function d(|z|)")
            if not self.r_min > 0:
                raise MeasureError("radial spec requires an inner cutoff r_min > 0")
            if not self.r_max > self.r_min:
                raise MeasureError("radial spec requires r_max > r_min")
            if self.n_radial < 1:
                raise MeasureError("radial spec needs at least one radial node")
            if self.dim == 2 and self.n_angular < 1:
                raise MeasureError("radial spec in 2-d needs at least one angular sector")
            if self.dim not in (1, 2):
                raise MeasureError(f"dimension {self.dim} not supported")


def build_quadrature(spec: MeasureSpec) -> LevyQuadrature:
    """Realize a :class:`MeasureSpec` as an atomic quadrature.

    Radial densities use the midpoint rule: shells ``s_i`` at cell centers of
    ``[r_min, r_max]`` and, in 2-d, angular sectors at ``theta_j``; weights are
    ``d(s_i) ds`` per side in 1-d and ``d(s_i) s_i ds dtheta`` in 2-d.
    Zero-density shells are dropped; negative densities are rejected.
    """
    if spec.kind == "atomic":
        z, w = spec.atoms
        return LevyQuadrature(z, w)
    ds = (spec.r_max - spec.r_min) / spec.n_radial
    s = spec.r_min + (np.arange(spec.n_radial) + 0.5) * ds
    d = np.asarray(spec.density_fn(s), dtype=float)
    if np.any(d < 0):
        raise MeasureError("radial density is negative on the annulus")
    if spec.dim == 1:
        w_side = d * ds
        keep = w_side > 0
        if not np.any(keep):
            raise MeasureError("radial density vanishes on every shell: empty atom set")
        z = np.concatenate([s[keep], -s[keep]])[:, None]
        w = np.concatenate([w_side[keep], w_side[keep]])
        return LevyQuadrature(z, w)
    dtheta = 2.0 * np.pi / spec.n_angular
    theta = (np.arange(spec.n_angular) + 0.5) * dtheta
    S, T = np.meshgrid(s, theta, indexing="ij")
    W = (d[:, None] * S * ds * dtheta).ravel()
    Z = np.column_stack([(S * np.cos(T)).ravel(), (S * np.sin(T)).ravel()])
    keep = W > 0
    if not np.any(keep):
        raise MeasureError("radial density vanishes on every shell: empty atom set")
    return LevyQuadrature(Z[keep], W[keep])


def second_moment_small(q: LevyQuadrature) -> float:
    """Second moment of the small-jump part: sum of ``w |z|^2`` over ``|z| <= 1``."""
    return q.s2


def tail_mass(q: LevyQuadrature) -> float:
    """Total mass of the tail part: sum of ``w`` over ``|z| > 1``."""
    return q.tmass
