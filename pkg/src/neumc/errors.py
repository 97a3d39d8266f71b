"""Exception taxonomy for the solver.

Three coarse classes matter to callers (and set the CLI exit code):

* ``ConfigError`` -- the run request itself is malformed (exit 2).
* ``HypothesisFailure`` -- the data violates a standing assumption the
  probabilistic representation needs (no exponential decay, divergent
  boundary gauge); the result would be meaningless, not just inaccurate
  (exit 3).
* everything else derived from ``SolverError`` -- a numerical procedure
  failed (singular regression, stalled fixed point, ...) (exit 4).
"""


class SolverError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SolverError):
    """Malformed configuration: unknown keys, bad types, inconsistent values."""


class HypothesisFailure(SolverError):
    """A standing assumption of the probabilistic representation failed."""


class GaugeDiverges(HypothesisFailure):
    """The weighted boundary local-time integral does not converge."""


class NoDecay(HypothesisFailure):
    """No exponential decay of the weighted semigroup / discount factor."""


class ProjectionAmbiguous(SolverError):
    """Nearest boundary point is not unique (strict mode only)."""


class NotOnBoundary(SolverError):
    """A boundary-only operation was evaluated at an interior point."""


class NotPositiveDefinite(SolverError):
    """Matrix square root requested for a non-SPD matrix."""


class StepTooLarge(SolverError):
    """A proposed increment overshoots farther than the scheme can reflect."""


class StencilOutsideDomain(SolverError):
    """A finite-difference stencil left the mesh."""


class MeshMismatch(SolverError):
    """A grid function does not cover the requested domain."""


class MissingV(SolverError):
    """Coefficient transform requested without an auxiliary potential."""


class SingularRegression(SolverError):
    """Least-squares projection is rank deficient; enlarge the ensemble or
    shrink the basis."""


class SingularSystem(SolverError):
    """A sparse linear system factorization failed."""


class PicardStalled(SolverError):
    """Fixed-point iteration stopped contracting."""


class NonConvergence(SolverError):
    """An iterative procedure exhausted its budget without meeting tolerance."""


class SmallnessViolated(UserWarning):
    """The singular drift norm exceeds the configured smallness threshold.

    Reported, not fatal: the rebalanced route is still attempted.
    """
