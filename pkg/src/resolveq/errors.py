"""Exception hierarchy shared by the library and the command line front end."""


class ResolveQError(Exception):
    """Base class for all package errors."""


class ValidationError(ResolveQError, ValueError):
    """Input violates a documented invariant (bad value, shape or schema)."""


class UnitTagError(ValidationError):
    """A numeric field in a data file carries no recognised unit suffix."""


class SolverError(ResolveQError):
    """A numerical routine could not produce a valid answer."""


class UnsolvableSystemError(SolverError):
    """The weighted participation matrix is rank deficient.

    Attributes
    ----------
    dependent_rows : list of str
        Labels of the modes that take part in the near-linear dependency.
    """

    def __init__(self, message, dependent_rows=()):
        super().__init__(message)
        self.dependent_rows = list(dependent_rows)


class ConvergenceError(SolverError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class MonteCarloError(SolverError):
    """Too many Monte-Carlo samples failed to solve."""


class NoCrossingError(SolverError):
    """The relative uncertainty never crosses 1 over the searched range."""


class FitFailure(SolverError):
    """A reflection trace could not be fitted by a circle."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
