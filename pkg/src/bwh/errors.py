"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical failures with 3.
"""


class ConfigError(ValueError):
    """Input fails a validation contract (bad dimensions, malformed files)."""


class NumericalError(RuntimeError):
    """A numerical guarantee was violated at run time."""


class SolvabilityError(NumericalError):
    """Right-hand side of a constrained solve has a kernel component."""


class ConvergenceError(NumericalError):
    """An iterative procedure failed to reach its tolerance."""
