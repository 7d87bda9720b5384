"""Exception types shared across the package.

Plain ``ValueError`` is used for bad arguments (non-finite inputs, shape
mismatches, unsupported activation kinds).  The classes below mark failure
modes the CLI maps to distinct exit codes.
"""


class MonoidError(Exception):
    """Base class for package-specific failures."""


class ConfigError(MonoidError):
    """Malformed configuration or input file (schema violation)."""


class SolverError(MonoidError):
    """A time step could not be completed (Newton or linear solve)."""

    def __init__(self, message, step=None, residual=None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class LineSearchError(MonoidError):
    """Armijo backtracking exhausted without sufficient decrease."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
