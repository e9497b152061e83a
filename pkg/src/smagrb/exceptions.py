"""Exception hierarchy shared across the package.

Every error raised on a user-reachable path derives from ``SmagrbError``
so the command line driver can distinguish solver failures from invalid
input when choosing its exit code.
"""


class SmagrbError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SmagrbError):
    """Invalid user input: bad config values, malformed files, bad arguments."""


class MeshFormatError(InvalidInputError):
    """A mesh file could not be parsed; the message names the offending line."""


class InvalidMeshError(InvalidInputError):
    """A mesh fails a structural check (orientation, indexing, boundary cover)."""


class ArchiveFormatError(InvalidInputError):
    """A stored artifact (snapshot, interpolation or basis archive) is corrupt
    or dimensionally incompatible with the current discretization."""


class ConfigError(InvalidInputError):
    """A run configuration file is malformed or contains invalid values."""


class SolverFailure(SmagrbError):
    """Base class for numerical failures during a solve."""


class NonConvergenceError(SolverFailure):
    """Pseudo-time iteration exhausted its step budget.

    Carries the number of steps taken and the last relative increment so
    callers can decide whether to retry with a different step size.
    """

    def __init__(self, message, iterations=None, last_increment=None):
        super().__init__(message)
        self.iterations = iterations
        self.last_increment = last_increment


class SingularSystemError(SolverFailure):
    """A linear system factorization failed (singular or badly scaled matrix)."""


class DegenerateResidualError(SolverFailure):
    """Greedy interpolation hit a numerically zero residual, so the training
    set is exhausted at the current tolerance."""


class StagnationError(SolverFailure):
    """Greedy sampling stopped making progress: either a parameter whose
    snapshot is already in the basis was re-selected, or the worst
    indicator grew past twice its previous value."""


class EigenSolveError(SolverFailure):
    """An eigenvalue computation failed to converge."""


class NonpositiveBetaError(SolverFailure):
    """The computed inf-sup factor is not strictly positive, so the
    stability theory behind the error bound does not apply."""


class RankDeficiencyError(SolverFailure):
    """More modes were requested than the snapshot set supports.

    ``rank`` carries the numerical rank found.
    """

    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class BoundViolationError(SolverFailure):
    """A certified error bound fell below the measured error on a
    verification sample."""
