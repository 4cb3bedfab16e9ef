"""Semi-geostrophic flow with a free surface via semidiscrete optimal transport."""

from .measures import (
    COMPRESSIBLE, FREE_SURFACE, INCOMPRESSIBLE, RIGID_LID,
    CostModel, DualCloud, FluidDomain, SolverConfig, ValidationReport,
    generate_cloud, load_cloud, second_moment, support_radius, validate_cloud,
)
from .geometry import (
    GridField, PotentialWeights, c_transform_of_f, check_c_concavity, cost,
    geopotential, geostrophic_velocity, legendre_transform, pressure,
)
from .laguerre import (
    CapTooLowError, ConsistencyError, SolverError, Tessellation, dual_functional,
    dual_gradient, set_num_threads, solve_weights, surface_height_crosscheck, tessellate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
