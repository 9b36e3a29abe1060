"""Exception hierarchy for ISAC-LOCATE.

Every error the library raises on purpose derives from ``IsacError`` so the
CLI can map it onto an exit code.
"""


class IsacError(Exception):
    """Base class for library errors."""


# --- Geometry / Scenario ---


class ScenarioError(IsacError):
    """Invalid or unusable geometry."""


class CollinearAnchors(ScenarioError):
    """Anchors (BSs) lie on a common line within tolerance."""


class ResolvabilityViolation(ScenarioError):
    """Two targets fall into the same delay tap of one BS."""

    def __init__(self, message: str, bs: int = -1, tap: int = -1):
        super().__init__(message)
        self.bs = bs
        self.tap = tap


class TapOutOfRange(ScenarioError):
    """Target delay exceeds what the cyclic prefix can absorb."""


# --- Solvers ---


class SolverError(IsacError):
    """Numerical solver failure."""


class NonConvergence(SolverError):
    """Iteration budget exhausted before the stopping criterion held."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class SingularJacobian(SolverError):
    """Gauss-Newton normal equations could not be formed or solved."""


# --- Association ---


class AssociationError(IsacError):
    """Data association could not be completed."""


class NoFeasibleSolution(AssociationError):
    """Ghost detection found no consistent coordinate set."""


class EmptyFeasibleSet(AssociationError):
    """Triangle-inequality pruning removed every candidate."""


class ComplexityGuard(AssociationError):
    """Exhaustive search requested beyond the supported size."""


# --- Configuration / Harness ---


class ConfigError(IsacError):
    """Configuration file missing, unreadable or invalid."""


class ExperimentAssertionError(IsacError):
    """A Monte Carlo property check failed."""

    def __init__(self, message: str, replay_path: str | None = None):
        super().__init__(message)
        self.replay_path = replay_path
