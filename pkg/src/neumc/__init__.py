"""Monte-Carlo solver for semilinear elliptic boundary value problems with
Neumann and mixed (divergence-form drift) boundary conditions.

The pipeline simulates diffusions reflected at the domain boundary, tracks
the boundary local time, and evaluates solution values as path-functional
expectations; semilinear problems run a damped fixed-point iteration over a
fitted solution field, and divergence-form drifts are removed by an
exponential change of variables computed with a deterministic weak solver.

Public surface: the solver entry points live in :mod:`neumc.pde`, backward
SDE machinery in :mod:`neumc.bsde`, path simulation in :mod:`neumc.rsde`
and :mod:`neumc.functionals`, the deterministic oracle in
:mod:`neumc.reference`, and ready-made problems in :mod:`neumc.presets`.
"""

from . import (bsde, errors, estimates, fields, functionals, geometry,
               parallel, pde, presets, reference, rsde, seeding)
from .errors import (ConfigError, GaugeDiverges, HypothesisFailure,
                     MeshMismatch, MissingV, NoDecay, NonConvergence,
                     PicardStalled, SingularRegression, SingularSystem,
                     SmallnessViolated, SolverError, StepTooLarge)
from .estimates import Estimate, mean_estimate
from .fields import CoefficientSet, Nonlinearity
from .pde import McConfig, ProblemSpec, SolutionField

__version__ = "0.1.0"

__all__ = [
    "bsde", "errors", "estimates", "fields", "functionals", "geometry",
    "parallel", "pde", "presets", "reference", "rsde", "seeding",
    "ConfigError", "GaugeDiverges", "HypothesisFailure", "MeshMismatch",
    "MissingV", "NoDecay", "NonConvergence", "PicardStalled",
    "SingularRegression", "SingularSystem", "SmallnessViolated",
    "SolverError", "StepTooLarge",
    "Estimate", "mean_estimate", "CoefficientSet", "Nonlinearity",
    "McConfig", "ProblemSpec", "SolutionField",
    "__version__",
]
