"""Uniform lattice grids, time grids, grid functions and discrete norms.

Space is discretized on the lattice ``x_beta = h*beta`` for integer
multi-indices ``beta``.  A :class:`Grid` selects a finite box window
``[a_i, b_i]^N`` of that lattice (the box endpoints must be lattice
points).  A :class:`GridFunction` stores one value per in-box node and is
implicitly zero at every lattice node outside the box, which is exactly
the convention used when a whole-space problem is restricted to a large
computational box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from numpy.polynomial.legendre import leggauss


def _lattice_index(coordinate: float, h: float, name: str) -> int:
    """Integer k with coordinate == k*h, or raise if off-lattice."""
    k = coordinate / h
    k_round = round(k)
    if abs(k - k_round) > 1e-9 * max(1.0, abs(k)):
        raise ValueError(f"{name}={coordinate} is not a multiple of h={h}")
    return int(k_round)


@dataclass(frozen=True)
class Grid:
    """Finite window of the uniform lattice h*Z^N.

    Attributes
    ----------
    h : float
        Grid spacing, shared by all axes.
    imin, imax : tuple of int
        Per-axis lattice index range; node count per axis is
        ``imax[i] - imin[i] + 1``.
    """

    h: float
    imin: tuple
    imax: tuple

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("spacing h must be positive")
        if len(self.imin) != len(self.imax):
            raise ValueError("imin/imax dimension mismatch")
        if any(b < a for a, b in zip(self.imin, self.imax)):
            raise ValueError("empty index range")

    @classmethod
    def from_box(cls, box, h: float) -> "Grid":
        """Grid on the box [a_1,b_1] x ... x [a_N,b_N], endpoints on the lattice."""
        box = [tuple(iv) for iv in box]
        imin = tuple(_lattice_index(a, h, "box lower bound") for a, _ in box)
        imax = tuple(_lattice_index(b, h, "box upper bound") for _, b in box)
        return cls(h=h, imin=imin, imax=imax)

    @classmethod
    def interval(cls, a: float, b: float, h: float) -> "Grid":
        return cls.from_box([(a, b)], h)

    @property
    def dim(self) -> int:
        return len(self.imin)

    @property
    def shape(self) -> tuple:
        return tuple(b - a + 1 for a, b in zip(self.imin, self.imax))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def box(self) -> tuple:
        return tuple((a * self.h, b * self.h) for a, b in zip(self.imin, self.imax))

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.h * np.arange(self.imin[axis], self.imax[axis] + 1)

    def meshgrid(self):
        """Coordinate arrays (one per axis), each of shape ``self.shape``."""
        axes = [self.axis_coords(d) for d in range(self.dim)]
        return np.meshgrid(*axes, indexing="ij")

    def cell_volume(self) -> float:
        return self.h ** self.dim


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time levels t_0 = 0 < t_1 < ... < t_J = T."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2 or t[0] != 0.0:
            raise ValueError("times must be a 1D array starting at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time steps must be positive")
        object.__setattr__(self, "times", t)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def steps(self) -> np.ndarray:
        """Per-step increments dt_j = t_j - t_{j-1}, j = 1..J."""
        return np.diff(self.times)

    @property
    def dt_max(self) -> float:
        return float(self.steps.max())

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def uniform_time_grid(T: float, dt_target: float) -> TimeGrid:
    """J = ceil(T/dt_target) equal steps of size T/J <= dt_target."""
    if T <= 0 or dt_target <= 0:
        raise ValueError("T and dt_target must be positive")
    J = max(1, math.ceil(T / dt_target - 1e-12))
    return TimeGrid(np.linspace(0.0, T, J + 1))


class GridFunction:
    """Values on the in-box nodes of a grid; zero on the rest of the lattice."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ValueError(f"values shape {values.shape} != grid shape {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        self.grid = grid
        self.values = values
        self.values.flags.writeable = False

    @classmethod
    def zeros(cls, grid: Grid) -> "GridFunction":
        return cls(grid, np.zeros(grid.shape))

    def value_at(self, beta) -> float:
        """Value at lattice multi-index beta; exactly 0 outside the box."""
        beta = np.atleast_1d(np.asarray(beta, dtype=int))
        if len(beta) != self.grid.dim:
            raise ValueError("multi-index dimension mismatch")
        idx = []
        for d, (b, a, z) in enumerate(zip(beta, self.grid.imin, self.grid.imax)):
            if b < a or b > z:
                return 0.0
            idx.append(b - a)
        return float(self.values[tuple(idx)])

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.grid, values)


# Nodes of the fixed per-cell quadrature: tensor product 3-point
# Gauss-Legendre, exact for polynomials of degree 5 per axis.
_GL_NODES, _GL_WEIGHTS = leggauss(3)


def cell_average(f, grid: Grid, mode: str = "average") -> GridFunction:
    """Project a scalar field onto the grid.

    ``mode="average"`` takes per-cell averages h^{-N} * integral of f over
    the cell x_beta + h*(-1/2, 1/2]^N, approximated by the fixed 3-point
    Gauss-Legendre tensor rule.  ``mode="point"`` samples f at the nodes,
    the usual shortcut for continuous data.

    The callable ``f`` receives one coordinate array per axis and must
    evaluate elementwise (numpy-vectorized).
    """
    if mode == "point":
        vals = f(*grid.meshgrid())
        vals = np.broadcast_to(np.asarray(vals, dtype=float), grid.shape).copy()
        if not np.all(np.isfinite(vals)):
            raise ValueError("field returned non-finite node values")
        return GridFunction(grid, vals)
    if mode != "average":
        raise ValueError(f"unknown mode {mode!r}")

    h = grid.h
    acc = np.zeros(grid.shape)
    mesh = grid.meshgrid()
    # Tensor product over per-axis Gauss points: N^3 evaluations.
    for combo in np.ndindex(*(3,) * grid.dim):
        w = 1.0
        pts = []
        for d, c in enumerate(combo):
            w *= _GL_WEIGHTS[c] / 2.0
            pts.append(mesh[d] + 0.5 * h * _GL_NODES[c])
        vals = np.asarray(f(*pts), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("field returned non-finite sample values")
        acc += w * np.broadcast_to(vals, grid.shape)
    return GridFunction(grid, acc)


def norm_l1(u: GridFunction) -> float:
    """h^N * sum of |u| over in-box nodes (lexicographic summation order)."""
    return u.grid.cell_volume() * float(np.sum(np.abs(u.values.ravel(order="C"))))


def norm_linf(u: GridFunction) -> float:
    return float(np.max(np.abs(u.values)))
