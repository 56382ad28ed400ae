"""Monotone nonlinearities phi and their Lipschitz regularizations.

The scheme needs phi nondecreasing and continuous with phi(0) = 0, plus a
Lipschitz constant on the working interval whenever phi enters an
explicit step (the CFL condition).  Non-Lipschitz kinds (powers with
exponent m < 1, the fast diffusion case) are replaced by regularizations:

* shift:    phi_eps(xi) = phi(xi + eps) - phi(eps) for xi >= 0 (odd for
            xi < 0), Lipschitz with constant m / eps^(1-m) for powers;
            preserves the zero level set.
* linear:   phi(xi) + eps * xi, strictly increasing.
* mollify:  (phi * bump_eps)(xi) - (phi * bump_eps)(0), smooth.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.polynomial.legendre import leggauss

# Slopes are clamped here when forming Jacobians of implicit steps; the
# M-matrix structure keeps the Newton systems solvable for any finite value.
SLOPE_CLAMP = 1e12


class Nonlinearity:
    """Nondecreasing continuous map with phi(0) = 0.

    Subclasses provide vectorized ``__call__``, a right-derivative
    ``slope`` (an element of the subdifferential at kinks) and an exact
    ``lipschitz_on`` for closed intervals, returning ``math.inf`` when no
    finite constant exists.
    """

    kind = "abstract"

    def __call__(self, xi):
        raise NotImplementedError

    def slope(self, xi):
        raise NotImplementedError

    def lipschitz_on(self, interval) -> float:
        raise NotImplementedError

    def check_monotone(self, lo=-1.0, hi=1.0, samples=513):
        xs = np.linspace(lo, hi, samples)
        ys = self(xs)
        if np.any(np.diff(ys) < -1e-12 * max(1.0, np.max(np.abs(ys)))):
            raise ValueError(f"{self.kind} nonlinearity is not nondecreasing")
        z = float(self(0.0))
        if abs(z) > 1e-12:
            raise ValueError(f"{self.kind} nonlinearity has phi(0) = {z} != 0")


def _interval(interval):
    lo, hi = float(interval[0]), float(interval[1])
    if lo > hi:
        raise ValueError("interval must satisfy lo <= hi")
    return lo, hi


class Identity(Nonlinearity):
    kind = "identity"

    def __call__(self, xi):
        return np.asarray(xi, dtype=float)

    def slope(self, xi):
        return np.ones_like(np.asarray(xi, dtype=float))

    def lipschitz_on(self, interval):
        _interval(interval)
        return 1.0


class Power(Nonlinearity):
    """phi(xi) = xi |xi|^(m-1) (odd extension of the power), m > 0.

    For m <= 1 the inverse xi = w |w|^(1/m - 1) is C^1, which implicit
    solvers exploit to step the degenerate (fast diffusion) regime.
    """

    kind = "power"

    def __init__(self, m: float):
        if m <= 0:
            raise ValueError("power exponent m must be positive")
        self.m = float(m)

    @property
    def has_smooth_inverse(self):
        return self.m <= 1.0

    def inverse(self, w):
        w = np.asarray(w, dtype=float)
        return np.sign(w) * np.abs(w) ** (1.0 / self.m)

    def inverse_slope(self, w):
        w = np.asarray(w, dtype=float)
        p = 1.0 / self.m - 1.0
        if p == 0.0:
            return np.ones_like(w)
        return (1.0 / self.m) * np.abs(w) ** p

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.sign(xi) * np.abs(xi) ** self.m

    def slope(self, xi):
        xi = np.asarray(xi, dtype=float)
        with np.errstate(divide="ignore"):
            s = self.m * np.abs(xi) ** (self.m - 1.0)
        if self.m < 1.0:
            s = np.where(np.abs(xi) > 0, s, np.inf)
        elif self.m == 1.0:
            s = np.ones_like(xi)
        return s

    def lipschitz_on(self, interval):
        lo, hi = _interval(interval)
        big = max(abs(lo), abs(hi))
        if self.m >= 1.0:
            return self.m * big ** (self.m - 1.0) if big > 0 else 0.0
        if lo <= 0.0 <= hi:
            return math.inf
        small = min(abs(lo), abs(hi))
        return self.m * small ** (self.m - 1.0)


class Stefan(Nonlinearity):
    """phi(xi) = max(0, a xi - b), a >= 0, b >= 0."""

    kind = "stefan"

    def __init__(self, a: float, b: float):
        if a < 0 or b < 0:
            raise ValueError("stefan parameters need a >= 0 and b >= 0")
        self.a = float(a)
        self.b = float(b)

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.maximum(0.0, self.a * xi - self.b)

    def slope(self, xi):
        xi = np.asarray(xi, dtype=float)
        # right derivative at the kink xi = b/a is a
        return np.where(self.a * xi - self.b >= 0.0, self.a, 0.0)

    def lipschitz_on(self, interval):
        lo, hi = _interval(interval)
        if self.a == 0.0 or self.a * hi - self.b < 0.0:
            return 0.0
        return self.a


class Piecewise(Nonlinearity):
    """Piecewise linear through knots, extended by end slopes.

    ``knots`` is a sequence of (x, y) pairs, strictly increasing in x and
    nondecreasing in y; outside the knot range the graph continues with
    ``slope_left`` / ``slope_right``.
    """

    kind = "piecewise"

    def __init__(self, knots, slope_left: float, slope_right: float):
        knots = sorted((float(x), float(y)) for x, y in knots)
        if len(knots) < 1:
            raise ValueError("need at least one knot")
        self.xs = np.array([x for x, _ in knots])
        self.ys = np.array([y for _, y in knots])
        if np.any(np.diff(self.xs) <= 0):
            raise ValueError("knot abscissae must be strictly increasing")
        if np.any(np.diff(self.ys) < 0) or slope_left < 0 or slope_right < 0:
            raise ValueError("piecewise nonlinearity must be nondecreasing")
        self.slope_left = float(slope_left)
        self.slope_right = float(slope_right)
        self.check_monotone(min(-1.0, self.xs[0] - 1), max(1.0, self.xs[-1] + 1))

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        core = np.interp(xi, self.xs, self.ys)
        left = self.ys[0] + self.slope_left * (xi - self.xs[0])
        right = self.ys[-1] + self.slope_right * (xi - self.xs[-1])
        return np.where(xi < self.xs[0], left,
                        np.where(xi > self.xs[-1], right, core))

    def _segment_slopes(self):
        inner = np.diff(self.ys) / np.diff(self.xs) if len(self.xs) > 1 else np.zeros(0)
        return np.concatenate([[self.slope_left], inner, [self.slope_right]])

    def slope(self, xi):
        xi = np.asarray(xi, dtype=float)
        slopes = self._segment_slopes()
        # right derivative: index of the segment starting at or before xi
        idx = np.searchsorted(self.xs, xi, side="right")
        return slopes[idx]

    def lipschitz_on(self, interval):
        lo, hi = _interval(interval)
        slopes = self._segment_slopes()
        # segments intersecting [lo, hi]
        i0 = int(np.searchsorted(self.xs, lo, side="right"))
        i1 = int(np.searchsorted(self.xs, hi, side="left"))
        return float(np.max(slopes[i0:i1 + 1]))


class ShiftRegularized(Nonlinearity):
    """phi_eps(xi) = phi(xi + eps) - phi(eps) on xi >= 0, odd continuation.

    For the power kind this keeps the zero level set and is globally
    Lipschitz with constant m / eps^(1-m).
    """

    kind = "regularized-shift"

    def __init__(self, base: Power, eps: float):
        if not isinstance(base, Power):
            raise ValueError("shift regularization is defined for power kinds")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.base = base
        self.eps = float(eps)

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        eps = self.eps
        pos = self.base(xi + eps) - self.base(eps)
        neg = self.base(xi - eps) - self.base(-eps)
        return np.where(xi >= 0, pos, neg)

    def slope(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.where(xi >= 0, self.base.slope(xi + self.eps),
                        self.base.slope(xi - self.eps))

    def lipschitz_on(self, interval):
        lo, hi = _interval(interval)
        m, eps = self.base.m, self.eps
        if m >= 1.0:
            return m * (max(abs(lo), abs(hi)) + eps) ** (m - 1.0)
        if lo <= 0.0 <= hi:
            return m / eps ** (1.0 - m)
        small = min(abs(lo), abs(hi))
        return m * (small + eps) ** (m - 1.0)


class LinearRegularized(Nonlinearity):
    """phi(xi) + eps xi."""

    kind = "regularized-linear"

    def __init__(self, base: Nonlinearity, eps: float):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.base = base
        self.eps = float(eps)

    def __call__(self, xi):
        return self.base(xi) + self.eps * np.asarray(xi, dtype=float)

    def slope(self, xi):
        return self.base.slope(xi) + self.eps

    def lipschitz_on(self, interval):
        return self.base.lipschitz_on(interval) + self.eps


_MOLLIFY_NODES, _MOLLIFY_WEIGHTS = leggauss(64)
_BUMP_NORM = None


def _bump(t):
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


def _bump_norm():
    global _BUMP_NORM
    if _BUMP_NORM is None:
        _BUMP_NORM = float(np.sum(_MOLLIFY_WEIGHTS * _bump(_MOLLIFY_NODES)))
    return _BUMP_NORM


class Mollified(Nonlinearity):
    """(phi * bump_eps)(xi) - (phi * bump_eps)(0) via fixed 64-point quadrature."""

    kind = "regularized-mollify"

    def __init__(self, base: Nonlinearity, eps: float):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.base = base
        self.eps = float(eps)
        self._offset = 0.0
        self._offset = float(self._convolve(np.array(0.0)))

    def _convolve(self, xi):
        xi = np.asarray(xi, dtype=float)
        t = _MOLLIFY_NODES
        w = _MOLLIFY_WEIGHTS * _bump(t) / _bump_norm()
        vals = self.base(xi[..., None] - self.eps * t)
        return np.sum(w * vals, axis=-1)

    def __call__(self, xi):
        return self._convolve(np.asarray(xi, dtype=float)) - self._offset

    def slope(self, xi):
        xi = np.asarray(xi, dtype=float)
        d = 1e-7 * max(1.0, float(np.max(np.abs(xi))) if xi.size else 1.0)
        return (self._convolve(xi + d) - self._convolve(xi)) / d

    def lipschitz_on(self, interval):
        lo, hi = _interval(interval)
        # mollification cannot increase the local Lipschitz constant beyond
        # the base constant on the eps-enlarged interval
        return self.base.lipschitz_on((lo - self.eps, hi + self.eps))


# -- constructors ------------------------------------------------------------

def identity() -> Nonlinearity:
    return Identity()


def power(m: float) -> Nonlinearity:
    return Power(m)


def stefan(a: float, b: float) -> Nonlinearity:
    return Stefan(a, b)


def piecewise(knots, slope_left: float, slope_right: float) -> Nonlinearity:
    return Piecewise(knots, slope_left, slope_right)


def stefan_plateau() -> Nonlinearity:
    """The piecewise nonlinearity xi / 0.2-plateau / xi - 0.2."""
    return Piecewise([(0.2, 0.2), (0.4, 0.2)], slope_left=1.0, slope_right=1.0)


def regularize_shift(phi: Nonlinearity, eps: float) -> Nonlinearity:
    return ShiftRegularized(phi, eps)


def regularize_linear(phi: Nonlinearity, eps: float) -> Nonlinearity:
    return LinearRegularized(phi, eps)


def regularize_mollify(phi: Nonlinearity, eps: float) -> Nonlinearity:
    return Mollified(phi, eps)
