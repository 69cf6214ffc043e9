"""Steady compressible Navier-Stokes laboratory.

Solves the epsilon-regularized steady barotropic system with slip boundary
conditions and pressure laws singular at vacuum, and measures the
quantities that keep the density bounded away from zero and infinity.
"""

from .errors import ConfigurationError, NumericsError, SolverError
from .geometry import DomainSpec, Grid, build_grid, boundary_integral, integrate, norm

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "NumericsError",
    "SolverError",
    "DomainSpec",
    "Grid",
    "build_grid",
    "integrate",
    "boundary_integral",
    "norm",
    "__version__",
]
