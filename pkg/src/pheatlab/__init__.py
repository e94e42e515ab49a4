"""Numerical laboratory for p-Laplacian heat flow with singular potentials."""

from .geometry import (
    Ball,
    Mesh,
    PolarTriMesh,
    RadialMesh,
    StarShaped2D,
    build_mesh,
    distance_to_boundary,
    domain_extremes,
)
from .potentials import (
    Potential,
    PotentialKind,
    eval_potential,
    make_potential,
    optimal_constant,
    potential_on_mesh,
    truncate_potential,
)
from .variational import (
    EigenPair,
    GridFunction,
    QuadratureDivergence,
    dirichlet_energy,
    first_eigenpair,
    grid_function,
    l2_norm,
    linf_norm,
    p_laplacian_apply,
    rayleigh_quotient,
    weighted_pnorm,
)
from .evolution import (
    BLOW_UP,
    COMPLETED,
    STEP_UNDERFLOW,
    ComparisonReport,
    EvolutionConfig,
    SimulationTrace,
    Subsolution,
    blow_up_time,
    build_subsolution,
    comparison_check,
    energy_estimate_check,
    solve_pheat,
    steady_profile_solve,
    step,
    time_factor,
)
from .profiles import initial_profile, random_bump_fields

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
