"""Monotone schemes for local and nonlocal porous medium type diffusion.

Solves partial differential equations u_t - L[phi(u)] = f on uniform
grids, where L combines a degenerate local second-order part with a
symmetric Levy (e.g. fractional Laplacian) part and phi is a merely
continuous nondecreasing nonlinearity (porous medium, fast diffusion,
Stefan).  The package provides the discrete operators (stencil builders
with nonnegative symmetric weights), theta-method time stepping with CFL
control and a semismooth Newton solver for implicit steps, reference
solutions with a quadrature oracle for the 1D fractional Laplacian, and
experiment drivers emitting convergence-rate tables.
"""

from .grid import (Grid, GridFunction, TimeGrid, cell_average, norm_l1,
                   norm_linf, uniform_time_grid)
from .levy import LevyMeasure, MomentMatrix, frac_laplacian_constant, fractional_measure
from .nonlinearity import (Nonlinearity, identity, piecewise, power,
                           regularize_linear, regularize_mollify,
                           regularize_shift, stefan, stefan_plateau)
from .operators import (AdmissibilityReport, StencilOperator,
                        admissibility_check, build_discrete_laplacian,
                        build_interp_quadrature, build_local, build_midpoint,
                        build_newton_cotes, build_pdl_1d,
                        build_trivial_singular, build_vanishing_viscosity,
                        build_vanishing_viscosity_coordinate, embed_1d,
                        lte_study, sum_ops)
from .reference import (ReferenceSolution, barenblatt_fast_diffusion,
                        frac_laplacian, frac_laplacian_profile,
                        fractional_heat_1d, gaussian_linear_time,
                        gaussian_sqrt_time_p8, heat_kernel_cauchy,
                        manufactured_rhs)
from .stepper import (CflViolationError, InfiniteLipschitzError, MassTracker,
                      SchemeSpec, SchemeTriple, SnapshotWriter, SolverFailure,
                      SolverPolicy, cfl_max_dt, evolve, step)
from .study import ConvergenceStudy, rate
from .experiments import (CflFraction, ExperimentConfig, Rule,
                          build_scheme_operator, domain_truncation_study,
                          make_nonlinearity, make_reference, run_convergence,
                          stefan_2d_demo)

__version__ = "0.1.0"
