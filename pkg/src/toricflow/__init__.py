"""Normalized real Monge-Ampere flow on toric polytopes, with a soliton
field solver and the verification diagnostics that go with it."""

from .polytope import FanoPolytope, PolytopeError, fixture, load_polytope
from .potentials import (
    ConvexityError,
    GridField,
    GridSpec,
    PotentialSet,
    asymptotics_report,
    build_initial,
    hessian_det,
    moment_map,
    reference_potential,
    support_cone,
    theta_field,
)
from .soliton import SolitonField, SolitonSolveError, log_partition, solve_soliton_field
from .flow import (
    DomainTooSmallError,
    FlowConfig,
    FlowError,
    FlowState,
    FlowTrace,
    discrete_soliton,
    initial_state,
    locate_minimum,
    project_step,
    rhs,
    run_flow,
    update_center,
)
from .functionals import (
    EnergyReport,
    dirichlet_energy,
    functional_Ftilde,
    functional_I,
    functional_Jtilde,
    kenergy_accumulate,
    normalize_h,
)
from .diagnostics import (
    check_bound_2_7,
    drift_report,
    min_enclosing_ellipsoid,
    perelman_proxy,
    soliton_residual,
    sublevel_points,
)

__version__ = "0.1.0"
