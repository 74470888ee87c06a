"""Exception hierarchy shared across the package."""


class SparseWacError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(SparseWacError, ValueError):
    """A physical or numerical parameter is out of its admissible range."""


class ModelParseError(SparseWacError, ValueError):
    """A model or config file could not be parsed (syntax, missing keys, types)."""


class ModelValidationError(SparseWacError, ValueError):
    """A parsed model violates a structural invariant (dimensions, block sparsity)."""


class UnstabilizableError(SparseWacError, RuntimeError):
    """No stabilizing Riccati solution exists for the given system."""


class ConvergenceError(SparseWacError, RuntimeError):
    """An iterative solver finished without meeting its residual tolerance."""


class NotHurwitzError(SparseWacError, ValueError):
    """An operation requiring a Hurwitz matrix received an unstable one."""


class IllConditionedError(SparseWacError, RuntimeError):
    """A matrix needed for a policy update is numerically singular."""


class DivergenceError(SparseWacError, RuntimeError):
    """State trajectory blew up during simulation or learning.

    Carries diagnostic attributes so callers can report partial results.
    """

    def __init__(self, message, *, last_state=None, iterations=None, log=None):
        super().__init__(message)
        self.last_state = last_state
        self.iterations = iterations
        self.log = log
