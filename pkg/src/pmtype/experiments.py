"""Convergence experiments: scheme assembly, manufactured sources, rate tables.

The experiment drivers reproduce the standard test protocol: solve on a
halving ladder h_j = h0 * 2^-j over a fixed box and horizon, measure the
error against a reference solution at the final time in the max and
scaled-l1 norms at the grid nodes, and report observed orders
gamma = log2(E_{j-1}/E_j).

Named spatial schemes (all monotone, all stencils truncated at the box
diameter with the far tail lumped):

* ``mpr``  midpoint rule on cells, singular part dropped
* ``foi``  first-order (hat) interpolation quadrature, singular part dropped
* ``soi``  quadratic interpolation quadrature outside |z| > r plus the
           coordinate-symmetric vanishing-viscosity surrogate inside
* ``pdl``  power of the discrete Laplacian (1D weights)
* ``laplacian``        the local Delta_h
* ``local_sl_pdl_x``   2D: semi-Lagrangian stencil for (sigma . D)^2 at scale
                       eta plus a scaled 1D pdl acting along the x axis

Right-hand sides for manufactured solutions v are
g = dt v + (-Delta)^(a/2)[phi(v)], evaluated per step from the quadrature
oracle; time-separable profiles phi(v) = a(t)^m w(x) reuse one oracle pass
per level, and piecewise-linear phi splits into slope-at-zero times v plus
a compactly supported residual handled by the panelled far-field rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nonlinearity as nl
from .grid import Grid, GridFunction, cell_average, norm_l1, norm_linf, uniform_time_grid
from .levy import fractional_measure
from .operators import (StencilOperator, build_interp_quadrature, build_local,
                        build_midpoint, build_newton_cotes, build_pdl_1d,
                        build_discrete_laplacian,
                        build_vanishing_viscosity_coordinate, embed_1d,
                        interp_cut_index, sum_ops)
from .reference import (ReferenceSolution, barenblatt_fast_diffusion,
                        frac_laplacian_profile, fractional_heat_1d,
                        gaussian_linear_time, gaussian_sqrt_time_p8)
from .stepper import SchemeSpec, SolverPolicy, cfl_max_dt, evolve
from .study import ConvergenceStudy, rate

__all__ = [
    "Rule", "ExperimentConfig", "run_convergence", "domain_truncation_study",
    "stefan_2d_demo", "rate", "ConvergenceStudy", "SCHEME_CATALOG",
    "make_nonlinearity", "make_reference", "build_scheme_operator",
]


@dataclass(frozen=True)
class Rule:
    """Power rule value(h) = c * h^p for scheme parameters and dt ladders."""

    c: float = 1.0
    p: float = 1.0

    def __call__(self, h: float) -> float:
        return self.c * h ** self.p

    @classmethod
    def parse(cls, text: str) -> "Rule":
        """Accepts 'h', 'c*h', 'h^p', 'c*h^p' (c, p floats)."""
        s = text.replace(" ", "")
        c, p = 1.0, 1.0
        if "*" in s:
            cs, s = s.split("*", 1)
            c = float(cs)
        if s in ("h",):
            pass
        elif s.startswith("h^"):
            p = float(s[2:])
        elif "h" not in s:
            c, p = float(s) * c, 0.0
        else:
            raise ValueError(f"cannot parse rule {text!r}")
        return cls(c=c, p=p)


@dataclass(frozen=True)
class CflFraction:
    """dt rule: the given fraction of the CFL monotonicity bound."""

    fraction: float = 0.5

    def __call__(self, h):
        raise TypeError("CflFraction is resolved by the driver, not evaluated directly")


@dataclass
class ExperimentConfig:
    # equation block
    alpha: float = 1.0
    phi: dict = field(default_factory=lambda: {"kind": "identity"})
    sigma: list = field(default_factory=list)        # local directions (2D demo)
    nonlocal_scale: float = 1.0                      # factor on the nonlocal part
    # scheme block
    scheme: str = "mpr"
    theta: float = 0.0
    r_rule: Rule = Rule(1.0, 1.0)                    # r(h)
    eta_rule: Rule = Rule(1.0, 0.5)                  # eta(h)
    nc_order: int = 2                                # k for soi / newton-cotes
    dt_rule: object = CflFraction(0.5)               # Rule or CflFraction
    cfl_mode: str = "enforce"
    source_time: str = "left"                        # left | right | theta
    solver_tol: float = 1e-10
    # domain block
    box: list = field(default_factory=lambda: [(-10.0, 10.0)])
    T: float = 1.0
    # data block
    initial: str = "reference"                       # reference | castle2d
    initial_mode: str = "point"                      # point | average
    source_mode: str = "zero"                        # zero | manufactured
    reference: str = "fractional_heat"
    reference_params: dict = field(default_factory=dict)
    # run block
    levels: int = 4
    h0: float = 0.5
    # output block
    outdir: str | None = None
    snapshot_times: list = field(default_factory=list)
    label: str = ""


# ---------------------------------------------------------------------------
# catalogs
# ---------------------------------------------------------------------------

def make_nonlinearity(spec: dict) -> nl.Nonlinearity:
    kind = spec.get("kind", "identity")
    if kind == "identity":
        phi = nl.identity()
    elif kind == "power":
        phi = nl.power(float(spec["m"]))
    elif kind == "stefan":
        phi = nl.stefan(float(spec["a"]), float(spec["b"]))
    elif kind == "piecewise":
        if "knots" in spec:
            phi = nl.piecewise(spec["knots"], float(spec.get("slope_left", 1.0)),
                               float(spec.get("slope_right", 1.0)))
        else:
            phi = nl.stefan_plateau()
    else:
        raise ValueError(f"unknown nonlinearity kind {kind!r}")
    reg = spec.get("regularize")
    if reg:
        variant, eps = reg["variant"], float(reg["eps"])
        if variant == "shift":
            phi = nl.regularize_shift(phi, eps)
        elif variant == "linear":
            phi = nl.regularize_linear(phi, eps)
        elif variant == "mollify":
            phi = nl.regularize_mollify(phi, eps)
        else:
            raise ValueError(f"unknown regularization variant {variant!r}")
    return phi


def make_reference(config: ExperimentConfig) -> ReferenceSolution:
    name = config.reference
    params = config.reference_params
    if name == "fractional_heat":
        return fractional_heat_1d()
    if name == "gaussian_linear_time":
        return gaussian_linear_time()
    if name == "gaussian_sqrt_time_p8":
        return gaussian_sqrt_time_p8()
    if name == "barenblatt":
        return barenblatt_fast_diffusion(float(params["m"]), config.alpha)
    raise ValueError(f"unknown reference solution {name!r}")


def _box_diameter(box) -> float:
    return math.sqrt(sum((b - a) ** 2 for a, b in box))


def build_scheme_operator(config: ExperimentConfig, h: float, box) -> StencilOperator:
    """Assemble the named spatial discretization at spacing h on the box."""
    name = config.scheme
    alpha = config.alpha
    r_max = _box_diameter(box)
    if name == "laplacian":
        return build_discrete_laplacian(len(box), h)
    if name == "pdl":
        M = max(1, int(round(r_max / h)))
        return build_pdl_1d(alpha, h, M)
    if name == "local_sl_pdl_x":
        eta = config.eta_rule(h)
        local = build_local([np.asarray(s, dtype=float) for s in config.sigma],
                            eta, h, dim=len(box))
        width_x = box[0][1] - box[0][0]
        pdl = build_pdl_1d(alpha, h, max(1, int(round(width_x / h))))
        return sum_ops([local, embed_1d(pdl, len(box), axis=0).scaled(config.nonlocal_scale)])
    mu = fractional_measure(len(box), alpha)
    r = config.r_rule(h)
    if name == "mpr":
        return build_midpoint(mu, r, h, r_max)
    if name == "foi":
        return build_interp_quadrature(mu, 1, r, h, r_max)
    if name == "soi":
        r_eff = interp_cut_index(2, r, h) * h
        visc = build_vanishing_viscosity_coordinate(mu, r_eff, h)
        quadr = build_interp_quadrature(mu, 2, r_eff, h, r_max)
        return sum_ops([visc, quadr])
    raise ValueError(f"unknown scheme {name!r}")


SCHEME_CATALOG = {
    "mpr": "midpoint rule on cells + trivial singular part; LTE O(h + r^(2-alpha))",
    "foi": "first-order interpolation quadrature + trivial singular part; "
           "LTE O(h^2 r^-alpha + r^(2-alpha))",
    "soi": "quadratic interpolation quadrature + coordinate vanishing viscosity; "
           "LTE O(h^(3-alpha)) at r = h",
    "pdl": "power of the discrete Laplacian (1D weights); LTE O(h^2)",
    "laplacian": "classical Delta_h; LTE O(h^2)",
    "local_sl_pdl_x": "semi-Lagrangian (sigma.D)^2 at scale eta + scaled 1D pdl "
                      "along x; LTE O(h^2/eta^2 + eta^2) + O(h^2)",
    "local": "semi-Lagrangian stencil for sum_i (sigma_i.D)^2; "
             "LTE O(h^2/eta^2 + eta^2)",
    "trivial_singular": "zero operator for the singular part; LTE O(r^(2-alpha))",
    "vanishing_viscosity": "local surrogate (1/2)tr(Z D^2) of the singular part; "
                           "LTE O(h^2/eta^2 + eta^2 r^(4-2alpha) + r^(4-alpha))",
    "vanishing_viscosity_coordinate": "axis-aligned viscosity surrogate; "
                                      "LTE O(h^2 r^(2-alpha) + r^(4-alpha))",
    "interp_quadrature": "int p^k_beta dmu weights, k in {0,1}; LTE O(h^(k+1} r^-alpha)",
    "newton_cotes": "rho(z_beta) int p^k_beta dz weights, k <= 6; "
                    "LTE O(h^(k+1) r^(-alpha-k-1)) for the fractional kernel",
    "midpoint": "cell-mass weights mu(z_beta + R_h); LTE O(h + r^(2-alpha))",
    "pdl_1d": "explicit Gamma-formula weights of (-Delta_h)^(alpha/2) in 1D",
}


# ---------------------------------------------------------------------------
# manufactured right-hand sides
# ---------------------------------------------------------------------------

def _scalar_phi(phi):
    """Fast python-scalar evaluator for the piecewise-linear kinds."""
    if isinstance(phi, nl.Stefan):
        a_, b_ = phi.a, phi.b
        return lambda v: max(0.0, a_ * v - b_)
    if isinstance(phi, nl.Piecewise):
        xs = [float(x) for x in phi.xs]
        ys = [float(y) for y in phi.ys]
        slopes = [float(s) for s in phi._segment_slopes()]
        import bisect

        def f(v):
            i = bisect.bisect_right(xs, v)
            if i == 0:
                return ys[0] + slopes[0] * (v - xs[0])
            return ys[i - 1] + slopes[i] * (v - xs[i - 1])

        return f
    return lambda v: float(phi(v))


class ManufacturedSource:
    """g(x, t) = dt v + (-Delta)^(alpha/2)[phi(v(., t))] sampled on the grid.

    Evaluation strategy by nonlinearity kind:

    * identity / power m on a separable profile v = a(t) w(x), w >= 0:
      phi(v) = a^m w^m, so one oracle pass over the nodes serves all steps.
    * piecewise-linear kinds (stefan, plateau) on v = a(t) w(x):
      phi(xi) = s0 xi + res(xi) with s0 the slope at 0 and res vanishing
      near 0, hence res(v(., t)) compactly supported; the s0 part reuses the
      one-pass oracle and the residual is integrated per step with the
      far-field panel rule, with breakpoints at the kink preimages.
    """

    def __init__(self, config: ExperimentConfig, ref: ReferenceSolution,
                 phi: nl.Nonlinearity, grid: Grid, theta: float):
        if grid.dim != 1:
            raise NotImplementedError("manufactured sources are 1D")
        self.alpha = config.alpha
        self.ref = ref
        self.phi = phi
        self.xs = grid.axis_coords(0)
        self.mode = config.source_time
        self.theta = theta
        self._cache = {}
        self._setup(config)

    # separable profiles: v(x,t) = a(t) * w(x); w^m negligible beyond rad(m)
    _SEPARABLE = {
        "gaussian_linear_time": (lambda t: t + 1.0,
                                 lambda x: np.exp(-np.asarray(x, float) ** 2),
                                 lambda m: math.sqrt(41.0 / m)),
        "gaussian_sqrt_time_p8": (lambda t: math.sqrt(t + 1.0),
                                  lambda x: np.exp(-np.asarray(x, float) ** 8),
                                  lambda m: (41.0 / m) ** 0.125),
    }

    def _setup(self, config):
        kind = self.ref.kind
        if kind not in self._SEPARABLE:
            raise NotImplementedError(f"no manufactured-source rule for {kind!r}")
        self.a_of_t, self.w_of_x, rad = self._SEPARABLE[kind]
        self.w_radius = rad(1.0)
        phi = self.phi
        if isinstance(phi, (nl.Identity, nl.Power)):
            m = 1.0 if isinstance(phi, nl.Identity) else phi.m
            self.m = m
            wm = lambda x: self.w_of_x(x) ** m
            self.fl_wm = frac_laplacian_profile(
                wm, self.alpha, self.xs, support_radius=rad(m))
            self.kind = "power"
        elif isinstance(phi, (nl.Stefan, nl.Piecewise)):
            s0 = float(np.asarray(phi.slope(0.0)))
            self.s0 = s0
            self.fl_w = frac_laplacian_profile(
                self.w_of_x, self.alpha, self.xs, support_radius=self.w_radius)
            if isinstance(phi, nl.Stefan):
                kinks = [phi.b / phi.a] if phi.a > 0 else []
            else:
                kinks = list(phi.xs)
            self.kinks = [k for k in kinks if k > 0]
            self.kind = "piecewise"
        else:
            raise NotImplementedError(
                f"manufactured source for nonlinearity kind {phi.kind!r}")

    def g_at(self, t: float) -> np.ndarray:
        cached = self._cache.get(t)
        if cached is not None:
            return cached
        a = self.a_of_t(t)
        dt_term = np.asarray(self.ref.dt(self.xs, t), dtype=float)
        if self.kind == "power":
            g = dt_term + a ** self.m * self.fl_wm
        else:
            g = dt_term + self.s0 * a * self.fl_w
            res_vals = self._residual_part(t, a)
            if res_vals is not None:
                g = g + res_vals
        self._cache[t] = g
        if len(self._cache) > 4:
            self._cache.pop(next(iter(self._cache)))
        return g

    def _residual_part(self, t, a):
        phi, s0 = self.phi, self.s0
        # preimages of the kinks under xi = a w(x) (w decreasing in |x|)
        cross = [k for k in self.kinks if k < a]
        if not cross:
            return None

        if self.ref.kind == "gaussian_linear_time":
            def x_of(xi):
                return math.sqrt(math.log(a / xi))

            def w_scalar(x):
                return math.exp(-x * x)
        else:
            def x_of(xi):
                return (math.log(a / xi)) ** 0.125

            def w_scalar(x):
                return math.exp(-x ** 8)

        support = max(x_of(k) for k in cross)
        breakpoints = sorted(x_of(k) for k in cross)
        phi_scalar = _scalar_phi(phi)

        def res(x):
            # adaptive quadrature probes with scalars, the far-field panel
            # rule with arrays; keep the scalar path allocation-free
            if isinstance(x, np.ndarray):
                v = a * self.w_of_x(x)
                return np.asarray(phi(v), dtype=float) - s0 * v
            v = a * w_scalar(x)
            return phi_scalar(v) - s0 * v

        # the scheme errors dwarf 1e-8, no need for oracle-grade tolerance here
        return frac_laplacian_profile(res, self.alpha, self.xs,
                                      support_radius=support,
                                      breakpoints=breakpoints, abs_tol=1e-8)

    def __call__(self, j, t_prev, t_curr, grid):
        if self.mode == "left":
            return self.g_at(t_prev)
        if self.mode == "right":
            return self.g_at(t_curr)
        if self.mode == "theta":
            th = self.theta
            return (1.0 - th) * self.g_at(t_prev) + th * self.g_at(t_curr)
        raise ValueError(f"unknown source_time {self.mode!r}")


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _initial_data(config, ref, grid):
    if config.initial == "reference":
        if grid.dim != 1:
            raise NotImplementedError("reference initial data is 1D")
        return cell_average(lambda x: ref.value(x, 0.0), grid,
                            mode=config.initial_mode)
    if config.initial == "castle2d":
        return cell_average(_castle_profile, grid, mode=config.initial_mode)
    raise ValueError(f"unknown initial data {config.initial!r}")


def _castle_profile(x, y):
    """3 on the 5-square minus the 2-square, 7 on the corner ring squares."""
    s1 = (np.abs(x) < 5.0) & (np.abs(y) < 5.0)
    s2 = (np.abs(x) < 2.0) & (np.abs(y) < 2.0)
    s3 = (np.abs(x) > 3.0) & (np.abs(x) < 4.0) & (np.abs(y) > 3.0) & (np.abs(y) < 4.0)
    return 3.0 * (s1.astype(float) - s2.astype(float)) + 4.0 * s3.astype(float)


def _resolve_dt(config, spec_op, phi, u0, source, T):
    """dt from the configured rule; CflFraction rules use the a-priori envelope."""
    rule = config.dt_rule
    if isinstance(rule, Rule):
        return rule(spec_op.h)
    if isinstance(rule, CflFraction):
        env = float(np.max(np.abs(u0.values)))
        if source is not None:
            samples = [np.max(np.abs(source.g_at(t))) for t in (0.0, T / 2, T)]
            env += T * float(max(samples))
        lip = phi.lipschitz_on((-env, env))
        if math.isinf(lip):
            raise ValueError("CFL-fraction dt rule needs a Lipschitz nonlinearity; "
                             "give an explicit dt rule or regularize phi")
        load = lip * spec_op.mass
        if load == 0.0:
            return T
        return rule.fraction / load
    raise TypeError(f"unsupported dt rule {rule!r}")


def _run_single_level(config, h):
    """Evolve one level; returns (err_linf, err_l1, dt, report)."""
    grid = Grid.from_box(config.box, h)
    ref = make_reference(config)
    phi = make_nonlinearity(config.phi)
    op = build_scheme_operator(config, h, config.box)
    u0 = _initial_data(config, ref, grid)
    source = None
    if config.source_mode == "manufactured":
        source = ManufacturedSource(config, ref, phi, grid, config.theta)
    dt = _resolve_dt(config, op, phi, u0, source, config.T)
    tg = uniform_time_grid(config.T, dt)
    spec = SchemeSpec.theta_method(op, phi, config.theta, tg, source=source)
    policy = SolverPolicy(tol=config.solver_tol, cfl_mode=config.cfl_mode)
    u_final, report = evolve(spec, u0, policy)
    if grid.dim != 1:
        raise NotImplementedError("run_convergence measures 1D errors; "
                                  "use stefan_2d_demo for self-convergence")
    exact = np.asarray(ref.value(grid.axis_coords(0), config.T), dtype=float)
    diff = u_final.values - exact
    err_linf = float(np.max(np.abs(diff)))
    err_l1 = grid.cell_volume() * float(np.sum(np.abs(diff)))
    return err_linf, err_l1, float(tg.steps[0]), report


def run_convergence(config: ExperimentConfig, levels: int | None = None) -> ConvergenceStudy:
    """Halving-ladder study of the configured experiment."""
    levels = config.levels if levels is None else levels
    if levels < 1:
        raise ValueError("need at least one level")
    study = ConvergenceStudy(meta={
        "label": config.label or config.scheme,
        "scheme": config.scheme, "alpha": config.alpha,
        "phi": config.phi.get("kind"), "box": tuple(map(tuple, config.box)),
        "T": config.T,
    })
    for j in range(levels):
        h = config.h0 * 2.0 ** (-j)
        err_linf, err_l1, dt, report = _run_single_level(config, h)
        row = study.add(h=h, dt=dt, err_linf=err_linf, err_l1=err_l1)
        study.meta.setdefault("flux", []).append(report.flux_total)
    return study


def domain_truncation_study(config: ExperimentConfig, boxes) -> list:
    """The same refinement ladder on each box; exposes the truncation plateaus."""
    studies = []
    for box in boxes:
        cfg = replace(config, box=[tuple(iv) for iv in box],
                      label=f"{config.scheme} box={box}")
        studies.append(run_convergence(cfg))
    return studies


def stefan_2d_demo(config: ExperimentConfig, observers_factory=None) -> dict:
    """Self-convergence of the 2D Stefan run against the finest ladder level.

    Levels h0 * 2^-j for j = 0..levels-1 are compared at the final time
    with the j = levels solution restricted to their nodes (coarse nodes
    are a subset of the fine nodes); errors are reported relative to the
    restricted fine solution's norms.
    """
    phi = make_nonlinearity(config.phi)
    solutions = []
    hs = []
    for j in range(config.levels + 1):
        h = config.h0 * 2.0 ** (-j)
        grid = Grid.from_box(config.box, h)
        op = build_scheme_operator(config, h, config.box)
        u0 = _initial_data(config, None, grid)
        dt = _resolve_dt(config, op, phi, u0, None, config.T)
        tg = uniform_time_grid(config.T, dt)
        spec = SchemeSpec.theta_method(op, phi, config.theta, tg, source=None)
        observers = observers_factory(j, grid) if observers_factory else ()
        u_final, report = evolve(spec, u0,
                                 SolverPolicy(tol=config.solver_tol,
                                              cfl_mode=config.cfl_mode),
                                 observers=observers)
        solutions.append(u_final)
        hs.append((h, float(tg.steps[0])))
    fine = solutions[-1]
    study = ConvergenceStudy(meta={"label": "stefan-2d self-convergence",
                                   "relative": True})
    for j in range(config.levels):
        ratio = 2 ** (config.levels - j)
        restr = fine.values[tuple(slice(None, None, ratio) for _ in range(fine.grid.dim))]
        coarse = solutions[j].values
        diff = coarse - restr
        rel_linf = float(np.max(np.abs(diff))) / float(np.max(np.abs(restr)))
        rel_l1 = float(np.sum(np.abs(diff))) / float(np.sum(np.abs(restr)))
        study.add(h=hs[j][0], dt=hs[j][1], err_linf=rel_linf, err_l1=rel_l1)
    return {"study": study, "finest_h": hs[-1][0], "solutions": solutions}
