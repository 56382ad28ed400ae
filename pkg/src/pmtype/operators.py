"""Monotone finite-difference stencils for Levy-type diffusion operators.

Every discrete operator here has the form

    L_h[psi](x) = sum_{beta != 0} (psi(x + z_beta) - psi(x)) * w_beta,

with lattice offsets z_beta = h*beta and weights w_beta >= 0 that are
symmetric under beta -> -beta.  Such an operator is itself a Levy operator
with atomic measure sum_beta w_beta * delta_{z_beta}, which is what makes
the whole class admissible: symmetric, monotone, with finite total mass
and a uniformly bounded sum of (|z_beta|^2 ^ 1) * w_beta.

Builders
--------
* ``build_local``              semi-Lagrangian stencil for sum_i (sigma_i . D)^2
* ``build_discrete_laplacian`` the classical Delta_h
* ``build_trivial_singular``   zero operator for the singular part |z| <= r
* ``build_vanishing_viscosity``            local surrogate (1/2) tr(Z D^2) of the
                                           singular part, Z = int_{|z|<r} z z^T dmu
* ``build_vanishing_viscosity_coordinate`` same under coordinate symmetry, on
                                           the axes, weights int z_i^2 dmu / (2h^2)
* ``build_midpoint``           cell masses mu(z_beta + R_h) for the bounded part
* ``build_interp_quadrature``  int_{|z|>r} p^k_beta dmu for k = 0, 1 (general mu)
* ``build_newton_cotes``       rho(z_beta) * int_{|z|>r} p^k_beta(z) dz, k <= 6
* ``build_pdl_1d``             1D power of the discrete Laplacian, explicit
                               Gamma-function weights

Stencils of the nonlocal builders are truncated at a radius ``R_max``
(normally the diameter of the computational box).  By default the mass
beyond the truncation is not discarded: it is lumped into a symmetric pair
of far atoms placed just outside reach, so that the operator acting on
data that vanish outside the box is exactly the untruncated one.  The
lumped mass is available as ``op.tail_mass`` for reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import next_fast_len, rfft, irfft
from scipy.integrate import newton_cotes as nc_coefficients
from scipy.special import gammaln

from .grid import GridFunction
from .levy import LevyMeasure, _quad

# Offsets varying along a single axis are applied by FFT convolution once
# there are at least this many of them; below that plain shifted adds win.
_AXIS_FFT_MIN = 16


class SpacingMismatchError(ValueError):
    pass


def _same_h(h1, h2):
    return abs(h1 - h2) <= 1e-12 * max(h1, h2)


class StencilOperator:
    """Immutable symmetric nonnegative stencil on the lattice h*Z^N."""

    __slots__ = ("h", "dim", "offsets", "weights", "tail_mass", "_plan", "_fft_cache")

    def __init__(self, h, dim, offsets, weights, tail_mass=0.0, validate=True):
        if h <= 0:
            raise ValueError("spacing h must be positive")
        offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, dim)
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if len(offsets) != len(weights):
            raise ValueError("offsets/weights length mismatch")
        keep = weights != 0.0
        offsets, weights = offsets[keep], weights[keep]
        order = np.lexsort(offsets.T[::-1])
        offsets, weights = offsets[order], weights[order]
        if validate:
            if np.any(weights < 0):
                raise ValueError("stencil weights must be nonnegative")
            if len(offsets) and np.any(np.all(offsets == 0, axis=1)):
                raise ValueError("offset beta = 0 is not allowed")
            _check_symmetry(offsets, weights)
        self.h = float(h)
        self.dim = int(dim)
        self.offsets = offsets
        self.weights = weights
        self.tail_mass = float(tail_mass)
        self._plan = None
        self._fft_cache = {}

    @property
    def mass(self) -> float:
        """Total mass nu_h(R^N) = sum of all weights."""
        return float(np.sum(self.weights))

    @property
    def n_entries(self) -> int:
        return len(self.weights)

    def scaled(self, factor: float) -> "StencilOperator":
        if factor < 0:
            raise ValueError("scaling factor must be nonnegative")
        return StencilOperator(self.h, self.dim, self.offsets,
                               factor * self.weights,
                               tail_mass=factor * self.tail_mass, validate=False)

    def weight_at(self, beta) -> float:
        beta = np.atleast_1d(np.asarray(beta, dtype=np.int64))
        hit = np.all(self.offsets == beta, axis=1)
        idx = np.nonzero(hit)[0]
        return float(self.weights[idx[0]]) if len(idx) else 0.0

    # -- application -----------------------------------------------------------

    def apply(self, u: GridFunction) -> GridFunction:
        """L_h[u] on u's grid, with u extended by zero outside its box."""
        if not _same_h(self.h, u.grid.h):
            raise SpacingMismatchError(
                f"operator spacing {self.h} != grid spacing {u.grid.h}")
        if self.dim != u.grid.dim:
            raise SpacingMismatchError("operator/grid dimension mismatch")
        return u.with_values(self.apply_values(u.values))

    def apply_values(self, values: np.ndarray) -> np.ndarray:
        axis_kernels, scattered = self._get_plan()
        out = np.zeros_like(values, dtype=float)
        for axis, kernel, reach in axis_kernels:
            out += self._axis_convolve(values, axis, kernel, reach)
        offs, wts = scattered
        ndim = values.ndim
        for beta, w in zip(offs, wts):
            src = []
            dst = []
            ok = True
            for d in range(ndim):
                b = int(beta[d])
                n = values.shape[d]
                lo_d, hi_d = max(0, -b), n - max(0, b)
                if hi_d <= lo_d:
                    ok = False
                    break
                dst.append(slice(lo_d, hi_d))
                src.append(slice(lo_d + b, hi_d + b))
            if ok:
                out[tuple(dst)] += w * values[tuple(src)]
        out -= self.mass * values
        return out

    def _get_plan(self):
        if self._plan is None:
            axis_groups = {}
            scattered_idx = []
            nz_counts = np.count_nonzero(self.offsets, axis=1) if len(self.offsets) else np.zeros(0)
            for idx in range(len(self.offsets)):
                if nz_counts[idx] == 1:
                    axis = int(np.nonzero(self.offsets[idx])[0][0])
                    axis_groups.setdefault(axis, []).append(idx)
                else:
                    scattered_idx.append(idx)
            axis_kernels = []
            for axis in sorted(axis_groups):
                idxs = axis_groups[axis]
                if len(idxs) < _AXIS_FFT_MIN:
                    scattered_idx.extend(idxs)
                    continue
                js = self.offsets[idxs, axis]
                ws = self.weights[idxs]
                reach = int(np.max(np.abs(js)))
                kernel = np.zeros(2 * reach + 1)
                # kernel index m holds the weight of offset (reach - m), so the
                # full convolution at lag i+reach equals sum_j w_j u[i+j]
                kernel[reach - js] = ws
                axis_kernels.append((axis, kernel, reach))
            scattered_idx.sort()
            scattered = (self.offsets[scattered_idx], self.weights[scattered_idx])
            self._plan = (axis_kernels, scattered)
        return self._plan

    def _axis_convolve(self, values, axis, kernel, reach):
        n = values.shape[axis]
        L = next_fast_len(n + 2 * reach, real=True)
        key = (axis, L)
        kf = self._fft_cache.get(key)
        if kf is None:
            kf = rfft(kernel, L)
            self._fft_cache[key] = kf
        uf = rfft(values, n=L, axis=axis)
        shape = [1] * values.ndim
        shape[axis] = len(kf)
        full = irfft(uf * kf.reshape(shape), n=L, axis=axis)
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(reach, reach + n)
        return full[tuple(sl)]

    # -- diagnostics -----------------------------------------------------------

    def dump(self) -> str:
        """One text line per entry: 'beta_1 ... beta_N weight', lexicographic."""
        lines = []
        for beta, w in zip(self.offsets, self.weights):
            lines.append(" ".join(str(int(b)) for b in beta) + f" {w:.17g}")
        return "\n".join(lines)


def _check_symmetry(offsets, weights):
    table = {tuple(map(int, b)): w for b, w in zip(offsets, weights)}
    for beta, w in table.items():
        neg = tuple(-b for b in beta)
        w_neg = table.get(neg)
        if w_neg is None or abs(w - w_neg) > 1e-12 * max(abs(w), abs(w_neg)):
            raise ValueError(f"stencil is not symmetric at offset {beta}")


def _from_dict(h, dim, acc, tail_mass=0.0, validate=True):
    if not acc:
        return StencilOperator(h, dim, np.zeros((0, dim), dtype=np.int64),
                               np.zeros(0), tail_mass=tail_mass, validate=False)
    offsets = np.array(list(acc.keys()), dtype=np.int64)
    weights = np.array(list(acc.values()), dtype=float)
    return StencilOperator(h, dim, offsets, weights, tail_mass=tail_mass,
                           validate=validate)


@dataclass(frozen=True)
class AdmissibilityReport:
    """Checkable part of the admissibility definition for a stencil family."""

    symmetric: bool
    nonnegative: bool
    total_mass: float
    uniform_levy_statistic: float

    @property
    def all_pass(self) -> bool:
        return self.symmetric and self.nonnegative and \
            math.isfinite(self.total_mass) and math.isfinite(self.uniform_levy_statistic)


def admissibility_check(op: StencilOperator) -> AdmissibilityReport:
    """Symmetry and sign verdicts plus the two Levy statistics of the stencil."""
    try:
        _check_symmetry(op.offsets, op.weights)
        symmetric = True
    except ValueError:
        symmetric = False
    nonnegative = bool(np.all(op.weights >= 0))
    z2 = np.sum((op.h * op.offsets.astype(float)) ** 2, axis=1) if op.n_entries \
        else np.zeros(0)
    ul = float(np.sum(np.minimum(z2, 1.0) * op.weights))
    return AdmissibilityReport(symmetric=symmetric, nonnegative=nonnegative,
                               total_mass=op.mass, uniform_levy_statistic=ul)


def sum_ops(ops) -> StencilOperator:
    """Merge stencils sharing a spacing, adding weights on coinciding offsets."""
    ops = list(ops)
    if not ops:
        raise ValueError("need at least one operator")
    h, dim = ops[0].h, ops[0].dim
    acc = {}
    tail = 0.0
    for op in ops:
        if not _same_h(op.h, h) or op.dim != dim:
            raise SpacingMismatchError("operators do not share spacing/dimension")
        tail += op.tail_mass
        for beta, w in zip(op.offsets, op.weights):
            key = tuple(map(int, beta))
            acc[key] = acc.get(key, 0.0) + w
    return _from_dict(h, dim, acc, tail_mass=tail, validate=False)


def embed_1d(op: StencilOperator, dim: int, axis: int = 0) -> StencilOperator:
    """Lift a 1D stencil to N dimensions, acting along the given axis."""
    if op.dim != 1:
        raise ValueError("embed_1d needs a 1D operator")
    offsets = np.zeros((op.n_entries, dim), dtype=np.int64)
    offsets[:, axis] = op.offsets[:, 0]
    return StencilOperator(op.h, dim, offsets, op.weights,
                           tail_mass=op.tail_mass, validate=False)


# ---------------------------------------------------------------------------
# local part: semi-Lagrangian stencils
# ---------------------------------------------------------------------------

def build_local(sigmas, eta: float, h: float, dim=None) -> StencilOperator:
    """Stencil for sum_i (sigma_i . D)^2 via interpolated long differences.

    Each direction contributes (psi(x + sigma_i eta) + psi(x - sigma_i eta)
    - 2 psi(x)) / eta^2 with the off-grid points replaced by their
    multilinear interpolants, which yields weights

        w_beta = (1/eta^2) * sum_{0<|i|<=P} hat(sigma_i eta - z_beta) >= 0.

    The beta = 0 term drops out by the partition of unity.
    """
    sigmas = [np.atleast_1d(np.asarray(s, dtype=float)) for s in sigmas]
    if dim is None:
        if not sigmas:
            raise ValueError("empty sigma list needs an explicit dim")
        dim = len(sigmas[0])
    if eta < h:
        raise ValueError("interpolation scale eta must satisfy eta >= h")
    acc = {}
    for s in sigmas:
        if len(s) != dim:
            raise ValueError("direction dimension mismatch")
        for sign in (1.0, -1.0):
            point = sign * s * eta / h  # in lattice units
            _accumulate_hat(acc, point, 1.0 / eta**2, dim)
    acc.pop((0,) * dim, None)
    return _from_dict(h, dim, acc)


def _accumulate_hat(acc, point, scale, dim):
    """Add the multilinear hat weights of a lattice-units point into acc."""
    per_axis = []
    for d in range(dim):
        q = point[d]
        base = math.floor(q)
        frac = q - base
        if frac < 1e-14:
            per_axis.append([(base, 1.0)])
        elif frac > 1 - 1e-14:
            per_axis.append([(base + 1, 1.0)])
        else:
            per_axis.append([(base, 1.0 - frac), (base + 1, frac)])
    stack = [((), 1.0)]
    for entries in per_axis:
        stack = [(idx + (k,), w * wk) for idx, w in stack for k, wk in entries]
    for idx, w in stack:
        acc[idx] = acc.get(idx, 0.0) + scale * w


def build_discrete_laplacian(dim: int, h: float) -> StencilOperator:
    """Classical second-order Delta_h: weights 1/h^2 at the 2N axis neighbours."""
    offsets = []
    for d in range(dim):
        e = [0] * dim
        e[d] = 1
        offsets.append(tuple(e))
        offsets.append(tuple(-v for v in e))
    return _from_dict(h, dim, {o: 1.0 / h**2 for o in offsets})


# ---------------------------------------------------------------------------
# singular part |z| <= r
# ---------------------------------------------------------------------------

def build_trivial_singular(dim: int, h: float) -> StencilOperator:
    """The zero discretization of the singular part (empty stencil)."""
    return _from_dict(h, dim, {})


def build_vanishing_viscosity(mu: LevyMeasure, r: float, eta: float,
                              h: float) -> StencilOperator:
    """Local surrogate of the singular part: discretize (1/2) tr(Z D^2).

    Z = int_{|z|<r} z z^T dmu(z) is symmetric PSD; the surrogate is the
    local operator with directions sqrt(Z/2) (the columns of sqrt(Z)
    scaled by 1/sqrt(2), which carries the 1/2 of the Taylor term), built
    with the semi-Lagrangian stencil at scale eta.
    """
    M = mu.moment_matrix(r)
    dirs = []
    scale = 1.0 / math.sqrt(2.0)
    for col in M.columns:
        if np.linalg.norm(col) > 0:
            dirs.append(scale * col)
    if not dirs:
        return build_trivial_singular(mu.dim, h)
    return build_local(dirs, eta, h, dim=mu.dim)


def build_vanishing_viscosity_coordinate(mu: LevyMeasure, r: float,
                                         h: float) -> StencilOperator:
    """Axis-aligned viscosity surrogate, valid for coordinate-symmetric mu.

    Weights (1/(2h^2)) int_{|z|<r} z_i^2 dmu at the offsets +-e_i.
    """
    if mu.symmetry not in ("coordinate", "radial"):
        raise ValueError("coordinate-symmetric viscosity needs a coordinate-"
                         "symmetric (or radial) measure")
    moments = mu.second_moments_axes(r)
    acc = {}
    for d in range(mu.dim):
        if moments[d] == 0.0:
            continue
        w = moments[d] / (2.0 * h * h)
        for sign in (1, -1):
            e = [0] * mu.dim
            e[d] = sign
            acc[tuple(e)] = w
    return _from_dict(h, mu.dim, acc)


# ---------------------------------------------------------------------------
# bounded part |z| > r: quadrature stencils
# ---------------------------------------------------------------------------

def _truncation_index(r_max: float, h: float) -> int:
    return int(math.floor(r_max / h + 1e-9))


def build_midpoint(mu: LevyMeasure, r: float, h: float, r_max: float,
                   tail: str = "lump") -> StencilOperator:
    """Midpoint-rule weights: w_beta = mu(z_beta + R_h) for |z_beta| >= r.

    Whole cells are used, so the region actually covered is the union of
    the cells of the included offsets, i.e. |z| above the inner cell
    boundary (j_min - 1/2) h.  With ``tail="lump"`` the measure of
    |z| > (M + 1/2) h beyond the truncation index M is carried by a
    symmetric pair of atoms just outside the truncation radius.
    """
    if tail not in ("lump", "drop"):
        raise ValueError("tail must be 'lump' or 'drop'")
    if mu.dim == 1:
        M = _truncation_index(r_max, h)
        j_min = max(1, int(math.ceil(r / h - 1e-9)))
        if j_min > M:
            return build_trivial_singular(1, h)
        js = np.arange(j_min, M + 1)
        if mu._interval_mass is not None:
            ws = np.asarray(mu._interval_mass((js - 0.5) * h, (js + 0.5) * h))
        else:
            ws = np.array([mu.cell_mass([j], h) for j in js])
        per_side = mu.interval_mass((M + 0.5) * h, math.inf)
        tail_mass = 2.0 * per_side
        if tail == "lump" and per_side > 0:
            js = np.append(js, M + 1)
            ws = np.append(ws, per_side)
        offsets = np.concatenate([js, -js]).reshape(-1, 1)
        weights = np.concatenate([ws, ws])
        return StencilOperator(h, 1, offsets, weights, tail_mass=tail_mass,
                               validate=False)

    # N-D: include cells by the center rule |z_beta| >= r, |z_beta| <= r_max.
    M = _truncation_index(r_max, h)
    acc = {}
    seen = set()
    for beta in _ball_offsets(mu.dim, M):
        key = tuple(beta)
        if key in seen or key == (0,) * mu.dim:
            continue
        s = h * math.sqrt(sum(b * b for b in beta))
        if s < r - 1e-12 * max(r, 1.0) or s > r_max:
            continue
        w = mu.cell_mass(beta, h)
        neg = tuple(-b for b in beta)
        acc[key] = w
        acc[neg] = w
        seen.add(key)
        seen.add(neg)
    tail_mass = mu.annulus_mass(M * h, math.inf)
    if tail == "lump" and tail_mass > 0:
        far = [0] * mu.dim
        far[0] = M + 1
        acc[tuple(far)] = acc.get(tuple(far), 0.0) + tail_mass / 2.0
        far[0] = -(M + 1)
        acc[tuple(far)] = acc.get(tuple(far), 0.0) + tail_mass / 2.0
    return _from_dict(h, mu.dim, acc, tail_mass=tail_mass, validate=False)


def _ball_offsets(dim, M):
    rng = range(-M, M + 1)
    if dim == 2:
        for i in rng:
            for j in rng:
                yield (i, j)
    else:
        import itertools
        yield from itertools.product(rng, repeat=dim)


def interp_cut_index(k: int, r: float, h: float) -> int:
    """Lattice index of the quadrature cut for order k (panel-aligned for k = 2).

    The singular-part companion (trivial / vanishing viscosity) should use
    the returned index times h as its radius so the operator split is exact.
    """
    s0 = max(1, int(math.ceil(r / h - 1e-9)))
    if k == 2 and s0 % 2 == 0:
        s0 += 1
    return s0


# Panels whose inner edge exceeds this many cells are integrated by a fixed
# product Gauss rule instead of monomial moments (avoids cancellation of
# z^2-size terms while the basis polynomials are O(h^2) on the panel).
_MOMENT_PANEL_MAX = 64
_PANEL_GL_NODES, _PANEL_GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


def build_interp_quadrature(mu: LevyMeasure, k: int, r: float, h: float,
                            r_max: float, tail: str = "lump") -> StencilOperator:
    """Interpolation-quadrature weights w_beta = int_{|z|>r} p^k_beta dmu.

    k = 0 and k = 1 have nonnegative Lagrange bases, hence monotone weights
    for every measure; k = 0 reduces to the midpoint rule on the cell
    partition and k = 1 integrates the hat functions against mu.  For
    k = 2 the basis has negative lobes but the integrated weights are
    still nonnegative for fractional-type kernels (they are verified at
    build time and the builder fails on a genuinely negative weight).
    The k = 2 panels span two cells starting at an odd lattice index, so
    r is snapped up to ``interp_cut_index(2, r, h) * h`` when misaligned.
    """
    if k not in (0, 1, 2):
        raise ValueError("general-measure interpolation quadrature needs k in {0, 1, 2}")
    if mu.dim != 1:
        raise NotImplementedError("interpolation quadrature is implemented in 1D; "
                                  "see build_local / build_pdl_1d for the N-D parts")
    if k == 0:
        if mu.alpha is not None:
            tail_measure = mu.annulus_mass(max(r, h / 2.0), math.inf)
            if h * tail_measure > 1.0:
                import warnings
                warnings.warn("k = 0 interpolation quadrature consistency needs "
                              "h = o(1/mu(|z|>r))", stacklevel=2)
        return build_midpoint(mu, max(r, h / 2.0), h, r_max, tail=tail)
    if k == 1:
        return _build_interp_hats(mu, r, h, r_max, tail)
    return _build_interp_quadratic(mu, r, h, r_max, tail)


def _build_interp_hats(mu, r, h, r_max, tail):
    M = _truncation_index(r_max, h)
    acc = {}
    for j in range(1, M + 1):
        # hat_j spans [(j-1)h, (j+1)h]; integrate rho * hat over |z| > r
        w = 0.0
        lo, mid, hi = (j - 1) * h, j * h, (j + 1) * h
        a = max(lo, r)
        if mid > a:
            w += _quad(lambda z: float(mu.rho(z)) * (z - lo) / h, a, mid)
        a = max(mid, r)
        if hi > a:
            w += _quad(lambda z: float(mu.rho(z)) * (hi - z) / h, a, hi)
        if w:
            acc[(j,)] = w
            acc[(-j,)] = w
    covered_to = M * h  # partition of unity complete only up to z_M
    per_side = mu.interval_mass(covered_to, math.inf)
    # subtract what the boundary hat already carries on [z_M, z_{M+1}]
    per_side -= _quad(lambda z: float(mu.rho(z)) * ((M + 1) * h - z) / h,
                      covered_to, (M + 1) * h)
    tail_mass = 2.0 * max(per_side, 0.0)
    if tail == "lump" and per_side > 0:
        acc[(M + 1,)] = acc.get((M + 1,), 0.0) + per_side
        acc[(-(M + 1),)] = acc.get((-(M + 1),), 0.0) + per_side
    return _from_dict(h, 1, acc, tail_mass=tail_mass, validate=False)


def _build_interp_quadratic(mu, r, h, r_max, tail):
    s0 = interp_cut_index(2, r, h)
    if abs(s0 * h - r) > 1e-9 * max(r, 1.0):
        import warnings
        warnings.warn(f"quadratic interpolation cut snapped from r={r} to "
                      f"{s0 * h}; use interp_cut_index to align the singular part",
                      stacklevel=3)
    M = _truncation_index(r_max, h)
    n_panels = max((M - s0) // 2, 1)
    starts = s0 + 2 * np.arange(n_panels)                      # lattice units
    node_w = np.zeros(2 * n_panels + 1)                        # nodes s0 .. s0+2P

    near = starts[starts <= _MOMENT_PANEL_MAX]
    if len(near):
        z0, z1, z2 = near * h, (near + 1) * h, (near + 2) * h
        m0 = np.asarray(mu.power_moment_interval(0, z0, z2))
        m1 = np.asarray(mu.power_moment_interval(1, z0, z2))
        m2 = np.asarray(mu.power_moment_interval(2, z0, z2))
        w0 = (m2 - (z1 + z2) * m1 + z1 * z2 * m0) / (2.0 * h * h)
        w1 = -(m2 - (z0 + z2) * m1 + z0 * z2 * m0) / (h * h)
        w2 = (m2 - (z0 + z1) * m1 + z0 * z1 * m0) / (2.0 * h * h)
        pos = near - s0
        np.add.at(node_w, pos, w0)
        np.add.at(node_w, pos + 1, w1)
        np.add.at(node_w, pos + 2, w2)
    far = starts[starts > _MOMENT_PANEL_MAX]
    if len(far):
        # product Gauss rule on each panel, all panels at once
        mid = (far + 1.0) * h
        zs = mid[:, None] + h * _PANEL_GL_NODES[None, :]
        rho = np.asarray(mu.rho(zs), dtype=float)
        t = _PANEL_GL_NODES[None, :]                           # (z - z1)/h
        l0 = 0.5 * t * (t - 1.0)
        l1 = (1.0 - t) * (1.0 + t)
        l2 = 0.5 * t * (t + 1.0)
        gw = h * _PANEL_GL_WEIGHTS[None, :]
        pos = far - s0
        np.add.at(node_w, pos, np.sum(gw * rho * l0, axis=1))
        np.add.at(node_w, pos + 1, np.sum(gw * rho * l1, axis=1))
        np.add.at(node_w, pos + 2, np.sum(gw * rho * l2, axis=1))

    wmax = float(np.max(node_w)) if len(node_w) else 0.0
    if np.any(node_w < -1e-12 * max(wmax, 1e-300)):
        raise ValueError("quadratic interpolation produced negative weights for "
                         "this measure; use k <= 1")
    node_w = np.maximum(node_w, 0.0)

    end = int(starts[-1]) + 2
    per_side = mu.interval_mass(end * h, math.inf)
    tail_mass = 2.0 * per_side
    js = s0 + np.arange(2 * n_panels + 1)
    ws = node_w
    if tail == "lump" and per_side > 0:
        js = np.append(js, end + 1)
        ws = np.append(ws, per_side)
    offsets = np.concatenate([js, -js]).reshape(-1, 1)
    weights = np.concatenate([ws, ws])
    return StencilOperator(h, 1, offsets, weights, tail_mass=tail_mass,
                           validate=False)


def nc_panel_weights(k: int) -> np.ndarray:
    """Closed Newton-Cotes weights on a panel of k unit cells (nonneg for k<=6)."""
    if not 1 <= k <= 6:
        raise ValueError("Newton-Cotes order k must be in 1..6")
    an, _ = nc_coefficients(k, equal=1)
    return np.asarray(an, dtype=float)


def build_newton_cotes(mu: LevyMeasure, k: int, r: float, h: float,
                       r_max: float, tail: str = "lump") -> StencilOperator:
    """Quadrature weights w_beta = rho(z_beta) * int_{|z|>r} p^k_beta(z) dz.

    The degree-k Lagrange basis lives on panels of k cells centered at the
    lattice points k*m*h, and the panel integrals are composite
    Newton-Cotes weights, nonnegative for k <= 6.  The cut radius is
    snapped up to the nearest panel boundary (k/2 + k*m) h so that only
    whole panels are integrated; the node sitting exactly on the cut
    keeps its one-sided weight from the outside panel.  k = 0 falls back
    to the cell rule with density frozen at the midpoint.
    """
    if not 0 <= k <= 6:
        raise ValueError("Newton-Cotes interpolation order must be in 0..6")
    if mu.dim != 1:
        raise NotImplementedError("Newton-Cotes quadrature stencils are 1D")
    M = _truncation_index(r_max, h)

    if k == 0:
        j_min = max(1, int(math.ceil(r / h + 0.5 - 1e-9)))
        acc = {}
        for j in range(j_min, M + 1):
            w = float(mu.rho(j * h)) * h
            acc[(j,)] = w
            acc[(-j,)] = w
        tail_mass = 2.0 * mu.interval_mass((M + 0.5) * h, math.inf)
        if tail == "lump" and tail_mass > 0:
            acc[(M + 1,)] = tail_mass / 2.0
            acc[(-(M + 1),)] = tail_mass / 2.0
        return _from_dict(h, 1, acc, tail_mass=tail_mass, validate=False)

    # Panel boundaries sit on integer nodes.  The cut is the first boundary
    # at or above r; even orders additionally keep the paper's panel grid
    # (panels centered on the k-lattice), i.e. s0 = k/2 (mod k).
    s0 = int(math.ceil(r / h - 1e-9))
    if k % 2 == 0:
        while s0 % k != (k // 2) % k:
            s0 += 1
    if abs(s0 * h - r) > 1e-9 * max(r, 1.0):
        import warnings
        warnings.warn(f"Newton-Cotes cut snapped from r={r} to panel boundary "
                      f"{s0 * h}", stacklevel=2)

    base = nc_panel_weights(k)
    n_panels = max((M - s0) // k, 0)
    # composite node weights: endpoints shared by neighbouring panels add up
    n_nodes = n_panels * k + 1 if n_panels else 0
    acc = {}
    if n_panels:
        comp = np.zeros(n_nodes)
        for p in range(n_panels):
            comp[p * k:(p + 1) * k + 1] += base
        js = s0 + np.arange(n_nodes)
        ws = np.asarray(mu.rho(js * h), dtype=float) * comp * h
        offsets = np.concatenate([js, -js]).reshape(-1, 1)
        weights = np.concatenate([ws, ws])
    else:
        offsets = np.zeros((0, 1), dtype=np.int64)
        weights = np.zeros(0)
    covered_to = (s0 + n_panels * k) * h
    tail_mass = 2.0 * mu.interval_mass(covered_to, math.inf) if covered_to > 0 else 0.0
    if tail == "lump" and tail_mass > 0:
        far = s0 + n_panels * k + 1
        offsets = np.concatenate([offsets, [[far], [-far]]])
        weights = np.concatenate([weights, [tail_mass / 2.0, tail_mass / 2.0]])
    return StencilOperator(h, 1, offsets, weights, tail_mass=tail_mass,
                           validate=False)


# ---------------------------------------------------------------------------
# powers of the discrete Laplacian, 1D
# ---------------------------------------------------------------------------

def pdl_weight_1d(alpha: float, h: float, j: int) -> float:
    """K_{j,h} = h^-alpha 2^alpha G((1+a2)/2) G(|j|-a/2) / (sqrt(pi)|G(-a/2)| G(|j|+1+a/2))."""
    if j == 0:
        raise ValueError("j must be nonzero")
    a = alpha / 2.0
    j = abs(j)
    log_k = (
        -alpha * math.log(h)
        + alpha * math.log(2.0)
        + gammaln((1.0 + alpha) / 2.0)
        - 0.5 * math.log(math.pi)
        - (gammaln(1.0 - a) - math.log(a))   # log |Gamma(-a)|
        + gammaln(j - a)
        - gammaln(j + 1.0 + a)
    )
    return math.exp(log_k)


def pdl_tail_1d(alpha: float, h: float, M: int) -> float:
    """Exact one-sided tail sum_{j > M} K_{j,h} via the telescoping identity.

    With a = alpha/2, Gamma(j-a)/Gamma(j+1+a) = (A_j - A_{j+1}) / (2a) for
    A_j = Gamma(j-a)/Gamma(j+a), and A_j -> 0, so the tail telescopes to
    A_{M+1}/(2a) times the prefactor.
    """
    a = alpha / 2.0
    log_pref = (
        -alpha * math.log(h)
        + alpha * math.log(2.0)
        + gammaln((1.0 + alpha) / 2.0)
        - 0.5 * math.log(math.pi)
        - (gammaln(1.0 - a) - math.log(a))
    )
    log_tail = gammaln(M + 1.0 - a) - gammaln(M + 1.0 + a) - math.log(2.0 * a)
    return math.exp(log_pref + log_tail)


def lte_study(op_builder, reference, psi, h_ladder, window) -> "ConvergenceStudy":
    """Local truncation errors ||L[psi] - L_h[psi]|| over a refinement ladder.

    ``op_builder(h)`` returns the stencil at spacing h, ``reference(xs)``
    evaluates the exact operator on an array of nodes, ``psi(xs)`` the test
    profile.  The stencil is applied on a grid padded by its own reach, so
    psi enters with its true values rather than the zero extension, and
    errors are measured on the nodes of ``window`` only, in the max norm
    and the scaled-l1 norm h * sum | . |.
    """
    from .grid import Grid, GridFunction
    from .study import ConvergenceStudy

    lo, hi = float(window[0]), float(window[1])
    study = ConvergenceStudy(meta={"kind": "lte"})
    for h in h_ladder:
        op = op_builder(h)
        if op.dim != 1:
            raise NotImplementedError("lte_study measures 1D operators")
        reach = int(np.max(np.abs(op.offsets))) if op.n_entries else 0
        k_lo = math.floor(lo / h + 1e-9) - reach
        k_hi = math.ceil(hi / h - 1e-9) + reach
        grid = Grid(h=h, imin=(k_lo,), imax=(k_hi,))
        xs = grid.axis_coords(0)
        u = GridFunction(grid, np.asarray(psi(xs), dtype=float))
        approx = op.apply(u).values
        sel = (xs >= lo - 1e-12) & (xs <= hi + 1e-12)
        diff = approx[sel] - np.asarray(reference(xs[sel]), dtype=float)
        study.add(h=h, dt=0.0, err_linf=float(np.max(np.abs(diff))),
                  err_l1=h * float(np.sum(np.abs(diff))))
    return study


def build_pdl_1d(alpha: float, h: float, M: int, tail: str = "lump") -> StencilOperator:
    """1D fractional power of the discrete Laplacian, truncated at |j| = M."""
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0, 2)")
    if M < 1:
        raise ValueError("truncation index M must be >= 1")
    js = np.arange(1, M + 1)
    a = alpha / 2.0
    log_pref = (
        -alpha * math.log(h)
        + alpha * math.log(2.0)
        + gammaln((1.0 + alpha) / 2.0)
        - 0.5 * math.log(math.pi)
        - (gammaln(1.0 - a) - math.log(a))
    )
    log_k = log_pref + gammaln(js - a) - gammaln(js + 1.0 + a)
    ks = np.exp(log_k)
    offsets = np.concatenate([js, -js]).reshape(-1, 1)
    weights = np.concatenate([ks, ks])
    tail_mass = 2.0 * pdl_tail_1d(alpha, h, M)
    if tail == "lump" and tail_mass > 0:
        offsets = np.concatenate([offsets, [[M + 1], [-(M + 1)]]])
        weights = np.concatenate([weights, [tail_mass / 2.0, tail_mass / 2.0]])
    return StencilOperator(h, 1, offsets, weights, tail_mass=tail_mass,
                           validate=False)
