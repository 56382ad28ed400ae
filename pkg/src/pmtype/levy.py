"""Symmetric Levy measures and the integral queries the weight builders need.

A measure mu is represented through its density rho(z) >= 0 on R^N \\ {0}
together with symmetry metadata.  Every operator builder reduces to three
kinds of integrals of rho: masses of lattice cells, masses of annuli
r_in < |z| < r_out, and truncated second moments Z_ij = int_{|z|<r} z_i z_j dmu.
The second moments are integrable under the Levy condition even when rho
blows up like |z|^{-N-alpha} at the origin; they are computed on geometric
radial shells so the singularity is resolved uniformly in alpha.

The fractional Laplacian measure rho = c_{N,alpha} |z|^{-N-alpha} carries
closed-form antiderivatives, so its cell masses and moments are exact; a
generic density goes through adaptive quadrature at 1e-10 relative
tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln

QUAD_REL_TOL = 1e-10
# Geometric-shell refinement near the origin stops when a shell contributes
# less than this fraction of the accumulated value.
SHELL_REL_TOL = 1e-12
_SHELL_MAX = 200


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


def frac_laplacian_constant(N: int, alpha: float) -> float:
    """Normalization c_{N,alpha} = 2^alpha Gamma((N+alpha)/2) / (pi^{N/2} |Gamma(-alpha/2)|)."""
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0, 2)")
    # |Gamma(-a)| = Gamma(1-a)/a for a = alpha/2 in (0,1).
    a = alpha / 2.0
    log_c = (
        alpha * math.log(2.0)
        + gammaln((N + alpha) / 2.0)
        - 0.5 * N * math.log(math.pi)
        - (gammaln(1.0 - a) - math.log(a))
    )
    return math.exp(log_c)


def _quad(f, a, b, points=None):
    val, err = quad(f, a, b, epsabs=1e-300, epsrel=QUAD_REL_TOL, limit=500, points=points)
    if not np.isfinite(val):
        raise QuadratureError(f"non-finite integral on [{a}, {b}]")
    if err > QUAD_REL_TOL * max(abs(val), 1e-300) * 100 and err > 1e-14:
        raise QuadratureError(f"quadrature did not converge on [{a}, {b}]: value {val}, error {err}")
    return val


class LevyMeasure:
    """Nonnegative symmetric Levy measure given by a density.

    Parameters
    ----------
    dim : int
        Ambient dimension N.
    density : callable
        rho(z): takes an (..., N) array (or scalar for N=1) and returns
        nonnegative values; must be even, rho(z) = rho(-z).
    alpha : float or None
        Singular order in (0, 2) when the fractional-type bounds
        int_{|z|<r} |z|^k dmu <= C r^{k-alpha} hold; None for measures with
        no prescribed order.
    symmetry : str
        "symmetric", "coordinate" (symmetric in every coordinate
        reflection) or "radial".
    interval_mass : callable, optional
        Exact one-sided integral int_a^b rho for 0 <= a < b (1D only);
        b may be inf.  Enables exact cell masses.
    second_moment_ball : callable, optional
        Exact int_{|z|<r} |z|^2 dmu(z).
    power_moment_interval : callable, optional
        Exact one-sided int_a^b z^n rho(z) dz for n = 0, 1, 2 (1D only),
        vectorized in (a, b).  Used by the interpolation quadratures.
    """

    def __init__(self, dim, density, alpha=None, symmetry="symmetric",
                 interval_mass=None, second_moment_ball=None,
                 power_moment_interval=None, check=True):
        if symmetry not in ("symmetric", "coordinate", "radial"):
            raise ValueError(f"unknown symmetry class {symmetry!r}")
        if alpha is not None and not 0 < alpha < 2:
            raise ValueError("alpha must lie in (0,2) or be None")
        self.dim = int(dim)
        self.density = density
        self.alpha = alpha
        self.symmetry = symmetry
        self._interval_mass = interval_mass
        self._second_moment_ball = second_moment_ball
        self._power_moment_interval = power_moment_interval
        if check:
            self._check_levy_condition()

    # -- basic density access -------------------------------------------------

    def rho(self, z):
        z = np.asarray(z, dtype=float)
        if self.dim == 1:
            return np.asarray(self.density(z), dtype=float)
        return np.asarray(self.density(z), dtype=float)

    def _rho_radial(self, r):
        """Density along the first axis; valid for radial measures."""
        if self.dim == 1:
            return self.rho(r)
        z = np.zeros(np.shape(r) + (self.dim,))
        z[..., 0] = r
        return self.rho(z)

    def _check_levy_condition(self):
        m2 = self.second_moment_ball(1.0)
        tail = self.annulus_mass(1.0, np.inf)
        if not (np.isfinite(m2) and np.isfinite(tail)):
            raise ValueError("Levy integrability check failed: "
                             f"int_{{|z|<=1}}|z|^2 dmu = {m2}, mu(|z|>1) = {tail}")

    # -- cell and annulus masses ----------------------------------------------

    def interval_mass(self, a: float, b: float) -> float:
        """One-sided 1D integral int_a^b rho(z) dz, 0 <= a < b <= inf."""
        if self.dim != 1:
            raise ValueError("interval_mass is a 1D query")
        if not 0 <= a < b:
            raise ValueError("need 0 <= a < b")
        if a == b:
            return 0.0
        if self._interval_mass is not None:
            return float(self._interval_mass(a, b))
        if math.isinf(b):
            return self._tail_mass_oneside(a)
        return _quad(lambda z: float(self.rho(z)), a, b)

    def _tail_mass_oneside(self, r):
        if r <= 0:
            raise ValueError("tail mass needs r > 0")
        val, err = quad(lambda z: float(self.rho(z)), r, np.inf,
                        epsabs=1e-300, epsrel=QUAD_REL_TOL, limit=500)
        if not np.isfinite(val):
            raise QuadratureError(f"tail integral from {r} diverged")
        return val

    def power_moment_interval(self, n: int, a, b):
        """One-sided int_a^b z^n rho(z) dz, vectorized over (a, b); 1D only."""
        if self.dim != 1:
            raise ValueError("power moments are a 1D query")
        if self._power_moment_interval is not None:
            return self._power_moment_interval(n, a, b)
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        out = np.array([_quad(lambda z: z ** n * float(self.rho(z)), lo, hi)
                        for lo, hi in zip(a, b)])
        return out if out.size > 1 else float(out[0])

    def cell_mass(self, beta, h: float, r_cut: float = 0.0) -> float:
        """Mass of the cell z_beta + h(-1/2, 1/2]^N, restricted to |z| > r_cut.

        The restriction only matters for cells straddling the cut radius
        (1D cells are split exactly; in higher dimensions the cut is
        applied by the cell-center rule, which the callers arrange to be
        exact or irrelevant).
        """
        beta = np.atleast_1d(np.asarray(beta))
        if len(beta) != self.dim:
            raise ValueError("multi-index dimension mismatch")
        if np.all(beta == 0) and r_cut <= 0:
            raise ValueError("origin cell requires a positive cut radius")
        if self.dim == 1:
            j = float(beta[0])
            lo, hi = (abs(j) - 0.5) * h, (abs(j) + 0.5) * h
            if j == 0:
                # both half-cells, outside the cut
                lo = r_cut
                return 2.0 * self.interval_mass(lo, hi) if hi > lo else 0.0
            lo = max(lo, r_cut, 0.0)
            if hi <= lo:
                return 0.0
            return self.interval_mass(lo, hi)
        # N-D: tensor quadrature over the full cell (callers keep cells away
        # from both the origin and the cut radius).
        return self._cell_mass_nd(beta, h)

    def _cell_mass_nd(self, beta, h):
        from scipy.integrate import nquad
        bounds = [((b - 0.5) * h, (b + 0.5) * h) for b in beta]

        def integrand(*zs):
            return float(self.rho(np.array(zs)))

        val, err = nquad(integrand, bounds,
                         opts={"epsabs": 1e-300, "epsrel": QUAD_REL_TOL})
        if not np.isfinite(val):
            raise QuadratureError(f"cell integral at beta={tuple(beta)} diverged")
        return val

    def annulus_mass(self, r_in: float, r_out: float) -> float:
        """mu({r_in < |z| < r_out}) to 1e-10 relative."""
        if not 0 <= r_in <= r_out:
            raise ValueError("need 0 <= r_in <= r_out")
        if r_in == r_out:
            return 0.0
        if self.dim == 1:
            if r_in > 0:
                return 2.0 * self.interval_mass(r_in, r_out)
            # mass down to the origin; diverges for genuinely singular rho
            if self._interval_mass is not None:
                return 2.0 * float(self._interval_mass(0.0, r_out))
            return 2.0 * _quad(lambda z: float(self.rho(z)), 0.0, r_out)
        if self.symmetry == "radial":
            surf = _sphere_area(self.dim)

            def shell(r):
                return surf * r ** (self.dim - 1) * float(self._rho_radial(r))

            if math.isinf(r_out):
                val, _ = quad(shell, r_in, np.inf, epsabs=1e-300,
                              epsrel=QUAD_REL_TOL, limit=500)
                return val
            return _quad(shell, r_in, r_out)
        raise NotImplementedError("annulus_mass for non-radial densities is 1D only")

    # -- truncated second moments ----------------------------------------------

    def second_moment_ball(self, r: float) -> float:
        """int_{|z|<r} |z|^2 dmu(z), resolved on geometric shells near 0."""
        if r <= 0:
            raise ValueError("need r > 0")
        if self._second_moment_ball is not None:
            return float(self._second_moment_ball(r))

        if self.dim == 1:
            def shell_integral(a, b):
                return 2.0 * _quad(lambda z: z * z * float(self.rho(z)), a, b)
        elif self.symmetry == "radial":
            surf = _sphere_area(self.dim)

            def shell_integral(a, b):
                return _quad(lambda s: surf * s ** (self.dim + 1)
                             * float(self._rho_radial(s)), a, b)
        else:
            def shell_integral(a, b):
                return self._moment_entry_shell_nd(a, b, None)

        return _geometric_shells(shell_integral, r)

    def second_moments_axes(self, r: float) -> np.ndarray:
        """Vector of int_{|z|<r} z_i^2 dmu(z); needs coordinate symmetry or better."""
        if self.dim == 1:
            return np.array([self.second_moment_ball(r)])
        if self.symmetry == "radial":
            return np.full(self.dim, self.second_moment_ball(r) / self.dim)
        if self.symmetry == "coordinate":
            return np.array([
                _geometric_shells(lambda a, b, i=i: self._moment_entry_shell_nd(a, b, (i, i)), r)
                for i in range(self.dim)
            ])
        raise ValueError("per-axis second moments need coordinate or radial symmetry")

    def moment_matrix(self, r: float) -> "MomentMatrix":
        """Z with Z_ij = int_{|z|<r} z_i z_j dmu and its PSD square root."""
        if not 0 < r:
            raise ValueError("need r > 0")
        N = self.dim
        Z = np.zeros((N, N))
        if N == 1:
            Z[0, 0] = self.second_moment_ball(r)
        elif self.symmetry in ("radial", "coordinate"):
            np.fill_diagonal(Z, self.second_moments_axes(r))
        else:
            for i in range(N):
                for j in range(i, N):
                    Z[i, j] = Z[j, i] = _geometric_shells(
                        lambda a, b, ij=(i, j): self._moment_entry_shell_nd(a, b, ij), r)
        return MomentMatrix.from_matrix(r, Z)

    def _moment_entry_shell_nd(self, a, b, ij):
        """int over the annulus a<|z|<b of z_i z_j rho (or |z|^2 rho if ij None)."""
        from scipy.integrate import nquad
        N = self.dim

        def integrand(*zs):
            z = np.array(zs)
            s = np.linalg.norm(z)
            if not a < s < b:
                return 0.0
            fac = (s * s) if ij is None else (z[ij[0]] * z[ij[1]])
            return fac * float(self.rho(z))

        val, _ = nquad(integrand, [(-b, b)] * N,
                       opts={"epsabs": 1e-14, "epsrel": 1e-8, "limit": 200})
        return val


def _sphere_area(N: int) -> float:
    """Surface area of the unit sphere in R^N."""
    return 2.0 * math.pi ** (N / 2.0) / math.gamma(N / 2.0)


def _geometric_shells(shell_integral, r: float) -> float:
    """Sum shell_integral over shells (r 2^{-k-1}, r 2^{-k}] until negligible."""
    total = 0.0
    hi = r
    for _ in range(_SHELL_MAX):
        lo = hi / 2.0
        contrib = shell_integral(lo, hi)
        total += contrib
        if abs(contrib) <= SHELL_REL_TOL * max(abs(total), 1e-300):
            return total
        hi = lo
    raise QuadratureError(f"shell refinement near 0 did not converge for r={r}")


@dataclass(frozen=True)
class MomentMatrix:
    """Truncated second-moment matrix Z and its principal square root."""

    r: float
    Z: np.ndarray
    sqrt: np.ndarray

    @classmethod
    def from_matrix(cls, r: float, Z: np.ndarray) -> "MomentMatrix":
        Z = 0.5 * (Z + Z.T)
        try:
            evals, evecs = np.linalg.eigh(Z)
        except np.linalg.LinAlgError as exc:
            raise QuadratureError(f"eigendecomposition of Z failed: {exc}") from exc
        clamp = 1e-12 * max(np.trace(Z), 0.0)
        evals = np.where(evals < clamp, np.maximum(evals, 0.0), evals)
        evals[evals < 0.0] = 0.0
        root = (evecs * np.sqrt(evals)) @ evecs.T
        return cls(r=r, Z=Z, sqrt=root)

    @property
    def columns(self) -> list:
        """Columns of sqrt(Z), the directions of the viscosity stencil."""
        return [self.sqrt[:, i].copy() for i in range(self.sqrt.shape[1])]


def fractional_measure(N: int, alpha: float) -> LevyMeasure:
    """The fractional Laplacian measure c_{N,alpha} |z|^{-N-alpha} dz.

    Cell masses and truncated moments use the closed-form power-law
    antiderivatives, so builder weights are exact to machine precision.
    """
    c = frac_laplacian_constant(N, alpha)

    if N == 1:
        def density(z):
            z = np.asarray(z, dtype=float)
            return c * np.abs(z) ** (-1.0 - alpha)

        def interval_mass(a, b):
            # int_a^b c z^{-1-alpha} dz = (c/alpha) (a^-alpha - b^-alpha);
            # vector-safe in both endpoints
            a = np.asarray(a, dtype=float)
            b = np.asarray(b, dtype=float)
            lo = np.where(a > 0, a, np.inf) ** (-alpha)
            lo = np.where(a > 0, lo, np.inf)
            hi = np.where(np.isinf(b), 0.0, np.where(b > 0, b, 1.0) ** (-alpha))
            out = (c / alpha) * (lo - hi)
            return float(out) if out.ndim == 0 else out

        def second_moment_ball(r):
            # int_{|z|<r} z^2 c|z|^{-1-alpha} dz = 2c r^{2-alpha}/(2-alpha)
            return 2.0 * c * r ** (2.0 - alpha) / (2.0 - alpha)

        def power_moment_interval(n, a, b):
            # int_a^b c z^{n-1-alpha} dz, log antiderivative when n = alpha
            a = np.asarray(a, dtype=float)
            b = np.asarray(b, dtype=float)
            p = n - 1.0 - alpha
            if abs(p + 1.0) < 1e-13:
                out = c * np.log(b / a)
            else:
                out = c * (b ** (p + 1.0) - a ** (p + 1.0)) / (p + 1.0)
            return float(out) if out.ndim == 0 else out

        return LevyMeasure(1, density, alpha=alpha, symmetry="radial",
                           interval_mass=interval_mass,
                           second_moment_ball=second_moment_ball,
                           power_moment_interval=power_moment_interval,
                           check=False)

    surf = _sphere_area(N)

    def density(z):
        z = np.asarray(z, dtype=float)
        s = np.linalg.norm(z, axis=-1)
        return c * s ** (-N - alpha)

    def second_moment_ball(r):
        # surf * int_0^r s^{N+1} c s^{-N-alpha} ds
        return surf * c * r ** (2.0 - alpha) / (2.0 - alpha)

    return LevyMeasure(N, density, alpha=alpha, symmetry="radial",
                       second_moment_ball=second_moment_ball, check=False)
