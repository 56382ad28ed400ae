"""Theta-method time stepping for u_t = sum_k L_k[phi_k(u)] + f.

One step of the general split scheme reads

    U^j = U^{j-1} + dt_j ( sum_{k impl} L_k[phi_k(U^j)]
                         + sum_{k expl} L_k[phi_k(U^{j-1})] + F^j ),

covering explicit Euler (theta = 0), implicit Euler (theta = 1),
Crank-Nicolson (theta = 1/2, one operator split into two scaled copies)
and mixed implicit/explicit treatments of different operator parts.

Monotonicity of the explicit part requires the CFL condition
dt * sum_{k expl} Lip(phi_k) * mass(L_k) <= 1, with the Lipschitz
constants taken on the a-priori solution envelope |u| <= ||U^0||_inf +
sum_l ||F^l||_inf dt_l.

Implicit steps solve G(U) = U - dt sum_k L_k[phi_k(U)] - rhs = 0 by a
damped semismooth Newton method (phi' is taken as the right derivative at
kinks, clamped at a large finite value where phi is non-Lipschitz), with
nonlinear Jacobi sweeps as a fallback when a Newton step stagnates.  The
Jacobian I + dt*(mass_k I - A_k) diag(phi_k') is an M-matrix-like
diagonally dominant matrix, so the linear solves are benign.

The run also tracks the mass leaked through the box boundary: summing the
scheme over the box gives

    h^N sum U^j - h^N sum U^{j-1} = dt h^N sum F^j - flux_j,
    flux_j = dt h^N sum_k sum_x out_mass_k(x) phi_k(U_k-input(x)),

where out_mass_k(x) is the weight mass connecting x to lattice nodes
outside the box (computed once per operator as -L_k[1]).  With flux_j
added back, discrete conservation holds to arithmetic/solver precision.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .grid import Grid, GridFunction, TimeGrid
from .nonlinearity import Nonlinearity, SLOPE_CLAMP
from .operators import StencilOperator

_DENSE_MAX = 4096

IMPLICIT = "implicit"
EXPLICIT = "explicit"


class CflViolationError(RuntimeError):
    pass


class InfiniteLipschitzError(RuntimeError):
    pass


class SolverFailure(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class SchemeTriple:
    op: StencilOperator
    phi: Nonlinearity
    timing: str

    def __post_init__(self):
        if self.timing not in (IMPLICIT, EXPLICIT):
            raise ValueError(f"timing must be 'implicit' or 'explicit', got {self.timing!r}")


@dataclass(frozen=True)
class SolverPolicy:
    """Tolerances and safeguards for the nonlinear solves and CFL checks."""

    tol: float = 1e-10
    max_iter: int = 50
    damping_min: float = 1e-6
    jacobi_sweeps: int = 12
    cfl_mode: str = "enforce"     # enforce | warn | off

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("residual tolerance must be positive")
        if self.cfl_mode not in ("enforce", "warn", "off"):
            raise ValueError("cfl_mode must be enforce, warn or off")


@dataclass(frozen=True)
class SchemeSpec:
    """Operator/nonlinearity/timing triples plus source and time grid."""

    triples: tuple
    time_grid: TimeGrid
    source: object = None      # source(j, t_prev, t_curr, grid) -> values or None

    def __post_init__(self):
        if not self.triples:
            raise ValueError("scheme needs at least one triple")
        h = self.triples[0].op.h
        for tr in self.triples:
            if abs(tr.op.h - h) > 1e-12 * h:
                raise ValueError("all operators must share the spacing h")
            tr.phi.check_monotone()

    @classmethod
    def theta_method(cls, op: StencilOperator, phi: Nonlinearity, theta: float,
                     time_grid: TimeGrid, source=None) -> "SchemeSpec":
        if not 0.0 <= theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if theta == 0.0:
            triples = (SchemeTriple(op, phi, EXPLICIT),)
        elif theta == 1.0:
            triples = (SchemeTriple(op, phi, IMPLICIT),)
        else:
            triples = (SchemeTriple(op.scaled(theta), phi, IMPLICIT),
                       SchemeTriple(op.scaled(1.0 - theta), phi, EXPLICIT))
        return cls(triples=triples, time_grid=time_grid, source=source)

    @property
    def explicit_triples(self):
        return [t for t in self.triples if t.timing == EXPLICIT]

    @property
    def implicit_triples(self):
        return [t for t in self.triples if t.timing == IMPLICIT]


def cfl_max_dt(spec: SchemeSpec, working_interval) -> float:
    """Largest dt with dt * sum_expl Lip(phi_k) mass_k <= 1; inf if fully implicit."""
    load = 0.0
    for idx, tr in enumerate(spec.triples):
        if tr.timing != EXPLICIT:
            continue
        lip = tr.phi.lipschitz_on(working_interval)
        if math.isinf(lip):
            raise InfiniteLipschitzError(
                f"explicit triple #{idx} ({tr.phi.kind}) has an infinite Lipschitz "
                f"constant on {tuple(working_interval)}; regularize the nonlinearity "
                "or make the triple implicit")
        load += lip * tr.op.mass
    return math.inf if load == 0.0 else 1.0 / load


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

@dataclass
class StepInfo:
    newton_iters: int = 0
    residual: float = 0.0
    flux: float = 0.0


def step(spec: SchemeSpec, u_prev: GridFunction, j: int,
         policy: SolverPolicy = SolverPolicy()) -> GridFunction:
    """Advance one time level; CFL is validated per the policy."""
    dt = float(spec.time_grid.steps[j - 1])
    t_prev = float(spec.time_grid.times[j - 1])
    t_curr = float(spec.time_grid.times[j])
    f_vals = _source_values(spec, j, t_prev, t_curr, u_prev.grid)
    env = float(np.max(np.abs(u_prev.values)))
    if f_vals is not None:
        env += dt * float(np.max(np.abs(f_vals)))
    _check_cfl(spec, dt, (-env, env), policy)
    new_vals, _ = _step_values(spec, u_prev.values, dt, f_vals, policy)
    return u_prev.with_values(new_vals)


def _source_values(spec, j, t_prev, t_curr, grid):
    if spec.source is None:
        return None
    vals = spec.source(j, t_prev, t_curr, grid)
    if vals is None:
        return None
    return np.broadcast_to(np.asarray(vals, dtype=float), grid.shape)


def _check_cfl(spec, dt, interval, policy):
    if policy.cfl_mode == "off":
        return
    try:
        bound = cfl_max_dt(spec, interval)
    except InfiniteLipschitzError:
        if policy.cfl_mode == "enforce":
            raise
        warnings.warn("explicit part has an infinite Lipschitz constant; "
                      "CFL check skipped", stacklevel=3)
        return
    if dt > bound * (1.0 + 1e-9):
        msg = (f"CFL violation: dt = {dt} exceeds the monotonicity bound "
               f"{bound} on the envelope {interval}")
        if policy.cfl_mode == "enforce":
            raise CflViolationError(msg)
        warnings.warn(msg, stacklevel=3)


def _step_values(spec, u, dt, f_vals, policy):
    rhs = u.copy()
    for tr in spec.explicit_triples:
        rhs += dt * tr.op.apply_values(np.asarray(tr.phi(u)))
    if f_vals is not None:
        rhs += dt * f_vals
    impl = spec.implicit_triples
    if not impl:
        return rhs, StepInfo()
    return _solve_implicit(impl, rhs, dt, u, policy)


def _residual(impl, U, rhs, dt):
    G = U - rhs
    for tr in impl:
        G -= dt * tr.op.apply_values(np.asarray(tr.phi(U)))
    return G


def _solve_implicit(impl, rhs, dt, u_init, policy):
    """Damped semismooth Newton with degenerate-regime fallbacks.

    When a Newton step on G(U) stagnates (the Jacobian diag clamps where
    phi' blows up, e.g. fast diffusion powers at 0), the solve switches to
    Newton in the transformed variable w = phi(U) whenever phi has a
    smooth inverse, and otherwise relaxes with nodewise monotone solves.
    """
    U = rhs.copy()        # explicit predictor as the initial iterate
    scale = max(1.0, float(np.max(np.abs(rhs))))
    transformable = (len(impl) == 1
                     and getattr(impl[0].phi, "has_smooth_inverse", False))
    if transformable:
        # Degenerate powers (fast diffusion): Newton in w = phi(U), where the
        # inverse is C^1 and the Jacobian needs no slope clamping.
        U_t, ok, its = _transformed_newton(impl[0], U, rhs, dt, scale, policy)
        if ok:
            G = _residual(impl, U_t, rhs, dt)
            return U_t, StepInfo(newton_iters=its,
                                 residual=float(np.max(np.abs(G))) / scale)
        U = U_t
    G = _residual(impl, U, rhs, dt)
    res = float(np.max(np.abs(G))) / scale
    history = [res]
    iters = 0
    slow = 0
    while res > policy.tol:
        if iters >= policy.max_iter:
            raise SolverFailure(
                f"implicit solve did not converge in {policy.max_iter} iterations "
                f"(residual history tail {history[-5:]})", history)
        J = _jacobian(impl, U, dt)
        if sp.issparse(J):
            delta = spsolve(J.tocsr(), -G)
        else:
            delta = np.linalg.solve(J, -G)
        delta = delta.reshape(U.shape)
        lam = 1.0
        improved = False
        while lam >= policy.damping_min:
            U_trial = U + lam * delta
            G_trial = _residual(impl, U_trial, rhs, dt)
            res_trial = float(np.max(np.abs(G_trial))) / scale
            if res_trial < res * (1.0 - 1e-4 * lam) or res_trial <= policy.tol:
                slow = slow + 1 if res_trial > 0.5 * res else 0
                U, G, res = U_trial, G_trial, res_trial
                improved = True
                break
            lam *= 0.5
        if not improved or slow >= 3:
            # stalled: relax with monotone nodewise solves, then resume
            slow = 0
            U = _jacobi_sweeps(impl, U, rhs, dt, policy.jacobi_sweeps)
            G = _residual(impl, U, rhs, dt)
            res = float(np.max(np.abs(G))) / scale
        iters += 1
        history.append(res)
    return U, StepInfo(newton_iters=iters, residual=res)


def _transformed_newton(tr, U, rhs, dt, scale, policy):
    """Newton on G(w) = phi^{-1}(w) - dt L[w] - rhs in the flux variable."""
    phi = tr.phi
    w = np.asarray(phi(U), dtype=float).copy()

    def residual_w(w):
        return phi.inverse(w) - dt * tr.op.apply_values(w) - rhs

    G = residual_w(w)
    res = float(np.max(np.abs(G))) / scale
    for it in range(policy.max_iter):
        if res <= policy.tol:
            return phi.inverse(w), True, it
        n = w.size
        diag = np.asarray(phi.inverse_slope(w), dtype=float).ravel() + dt * tr.op.mass
        rows, cols, vals = _offdiag_entries(tr.op, w.shape, -dt)
        if n <= _DENSE_MAX:
            J = np.zeros((n, n))
            J[np.arange(n), np.arange(n)] = diag
            np.add.at(J, (rows, cols), vals)
            delta = np.linalg.solve(J, -G.ravel())
        else:
            J = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)) + sp.diags(diag)
            delta = spsolve(J.tocsr(), -G.ravel())
        delta = delta.reshape(w.shape)
        lam = 1.0
        improved = False
        while lam >= policy.damping_min:
            w_trial = w + lam * delta
            G_trial = residual_w(w_trial)
            res_trial = float(np.max(np.abs(G_trial))) / scale
            if res_trial < res * (1.0 - 1e-4 * lam) or res_trial <= policy.tol:
                w, G, res = w_trial, G_trial, res_trial
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
    return (phi.inverse(w), res <= policy.tol, policy.max_iter)


def _offdiag_entries(op, shape, factor):
    """COO data of factor * A for the stencil's neighbour matrix A."""
    flat_idx = np.arange(int(np.prod(shape))).reshape(shape)
    rows_l, cols_l, vals_l = [], [], []
    for beta, wgt in zip(op.offsets, op.weights):
        src, dst = [], []
        ok = True
        for d in range(len(shape)):
            b = int(beta[d])
            lo, hi = max(0, -b), shape[d] - max(0, b)
            if hi <= lo:
                ok = False
                break
            dst.append(slice(lo, hi))
            src.append(slice(lo + b, hi + b))
        if not ok:
            continue
        rows = flat_idx[tuple(dst)].ravel()
        cols = flat_idx[tuple(src)].ravel()
        rows_l.append(rows)
        cols_l.append(cols)
        vals_l.append(np.full(len(rows), factor * wgt))
    if not rows_l:
        return (np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0))
    return (np.concatenate(rows_l), np.concatenate(cols_l), np.concatenate(vals_l))


def _jacobian(impl, U, dt):
    n = U.size
    shape = U.shape
    diag = np.ones(n)
    entries_rows, entries_cols, entries_vals = [], [], []
    for tr in impl:
        slopes = np.minimum(np.asarray(tr.phi.slope(U), dtype=float), SLOPE_CLAMP)
        slopes = np.maximum(slopes, 0.0)
        diag += dt * tr.op.mass * slopes.ravel()
        flat_idx = np.arange(n).reshape(shape)
        for beta, w in zip(tr.op.offsets, tr.op.weights):
            src, dst = [], []
            ok = True
            for d in range(len(shape)):
                b = int(beta[d])
                lo, hi = max(0, -b), shape[d] - max(0, b)
                if hi <= lo:
                    ok = False
                    break
                dst.append(slice(lo, hi))
                src.append(slice(lo + b, hi + b))
            if not ok:
                continue
            rows = flat_idx[tuple(dst)].ravel()
            cols = flat_idx[tuple(src)].ravel()
            entries_rows.append(rows)
            entries_cols.append(cols)
            entries_vals.append(-dt * w * slopes.ravel()[cols])
    if entries_rows:
        rows = np.concatenate(entries_rows)
        cols = np.concatenate(entries_cols)
        vals = np.concatenate(entries_vals)
    else:
        rows = cols = np.zeros(0, dtype=int)
        vals = np.zeros(0)
    if n <= _DENSE_MAX:
        J = np.zeros((n, n))
        J[np.arange(n), np.arange(n)] = diag
        np.add.at(J, (rows, cols), vals)
        return J
    J = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    J = J + sp.diags(diag)
    return J


def _jacobi_sweeps(impl, U, rhs, dt, sweeps):
    """Nodewise monotone solves with frozen neighbour terms (bisection)."""
    total_mass = sum(tr.op.mass for tr in impl)

    def phi_load(vals):
        # dt * sum_k mass_k phi_k(vals), elementwise nondecreasing, 0 at 0
        out = np.zeros_like(vals)
        for tr in impl:
            out += dt * tr.op.mass * np.asarray(tr.phi(vals))
        return out

    for _ in range(sweeps):
        q = rhs.copy()
        for tr in impl:
            conv = tr.op.apply_values(np.asarray(tr.phi(U))) \
                + tr.op.mass * np.asarray(tr.phi(U))
            q += dt * conv            # neighbour sums only
        lo = np.minimum(q, 0.0)
        hi = np.maximum(q, 0.0)
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            g = mid + phi_load(mid) - q
            lo = np.where(g < 0, mid, lo)
            hi = np.where(g < 0, hi, mid)
        U = 0.5 * (lo + hi)
        if total_mass == 0.0:
            break
    return U


# ---------------------------------------------------------------------------
# evolution with observers
# ---------------------------------------------------------------------------

@dataclass
class EvolveReport:
    flux_total: float = 0.0
    source_integral: float = 0.0       # sum_l dt_l h^N sum F^l
    newton_iters_total: int = 0
    cfl_bound: float = math.inf
    envelope: float = 0.0


class MassTracker:
    """Observer recording h^N sum U^j and the accumulated boundary flux."""

    def __init__(self):
        self.times = []
        self.masses = []
        self.fluxes = []

    def __call__(self, j, t, u_vals, cell_volume, info):
        self.times.append(t)
        self.masses.append(cell_volume * float(np.sum(u_vals.ravel())))
        self.fluxes.append(info.flux)


class SnapshotWriter:
    """Observer writing node/value CSV snapshots at selected times."""

    def __init__(self, grid: Grid, times, path_pattern):
        self.grid = grid
        self.remaining = sorted(float(t) for t in times)
        self.path_pattern = str(path_pattern)
        self.written = []

    def __call__(self, j, t, u_vals, cell_volume, info):
        if not self.remaining or t < self.remaining[0] - 1e-12:
            return
        self.remaining = [s for s in self.remaining if s > t + 1e-12]
        path = self.path_pattern.format(j=j, t=t)
        write_snapshot_csv(path, self.grid, u_vals, t)
        self.written.append(path)


def write_snapshot_csv(path, grid: Grid, u_vals, t):
    mesh = grid.meshgrid()
    cols = [m.ravel(order="C") for m in mesh] + [np.asarray(u_vals).ravel(order="C")]
    header = ",".join(f"x{d + 1}" for d in range(grid.dim)) + ",value"
    with open(path, "w") as fh:
        fh.write(f"# h={grid.h:.17g} t={t:.17g}\n")
        fh.write(header + "\n")
        for row in zip(*cols):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def evolve(spec: SchemeSpec, u0: GridFunction,
           policy: SolverPolicy = SolverPolicy(), observers=()):
    """Run the scheme over the whole time grid; returns (U^J, EvolveReport)."""
    grid = u0.grid
    vol = grid.cell_volume()
    U = u0.values.copy()
    ones = np.ones(grid.shape)
    out_mass = {}
    for tr in spec.triples:
        key = id(tr.op)
        if key not in out_mass:
            out_mass[key] = -tr.op.apply_values(ones)
    report = EvolveReport(envelope=float(np.max(np.abs(U))))
    env = report.envelope
    for j in range(1, spec.time_grid.n_steps + 1):
        dt = float(spec.time_grid.steps[j - 1])
        t_prev = float(spec.time_grid.times[j - 1])
        t_curr = float(spec.time_grid.times[j])
        f_vals = _source_values(spec, j, t_prev, t_curr, grid)
        if f_vals is not None:
            env += dt * float(np.max(np.abs(f_vals)))
            report.source_integral += dt * vol * float(np.sum(f_vals.ravel()))
        _check_cfl(spec, dt, (-env, env), policy)
        if policy.cfl_mode != "off":
            try:
                report.cfl_bound = min(report.cfl_bound,
                                       cfl_max_dt(spec, (-env, env)))
            except InfiniteLipschitzError:
                pass
        U_new, info = _step_values(spec, U, dt, f_vals, policy)
        flux = 0.0
        for tr in spec.triples:
            inp = U if tr.timing == EXPLICIT else U_new
            flux += dt * vol * float(np.sum(out_mass[id(tr.op)].ravel()
                                            * np.asarray(tr.phi(inp)).ravel()))
        info.flux = flux
        report.flux_total += flux
        report.newton_iters_total += info.newton_iters
        for obs in observers:
            obs(j, t_curr, U_new, vol, info)
        U = U_new
    report.envelope = env
    return GridFunction(grid, U), report
