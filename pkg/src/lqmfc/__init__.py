"""Linear-quadratic mean field control with non-convex mean-field couplings.

Riccati and decoupling-field solvers for the optimal feedback laws,
particle simulation under common noise, and convergence-rate studies.
"""
from .model import (
    AssumptionError,
    AssumptionReport,
    InitialLaw,
    MfcModel,
    ModelError,
    ScalarC2Fn,
    catalog_make,
    fn_from_spec,
    validate_assumptions,
)
from .riccati import TimeGridFn, solve_P, solve_Pi
from .feedback import RhoSolver, k_map, rho, rho_prime
from .fields import (
    PdeConfig,
    SpaceTimeField,
    lq_phi_oracle,
    make_pde_config,
    residual_U,
    solve_decoupling_field,
)

__version__ = "0.1.0"
