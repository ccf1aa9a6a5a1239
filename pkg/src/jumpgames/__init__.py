"""Nash equilibria and actor-critic solvers for jump-diffusion control problems and portfolio games."""

from .errors import (
    DegenerateMetric,
    InvalidArgument,
    InvalidState,
    JumpGamesError,
    NoConvergence,
    NumericFault,
    OutOfDomain,
    UnsupportedMeasure,
)

__version__ = "0.1.0"
