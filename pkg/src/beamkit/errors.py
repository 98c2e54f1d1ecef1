"""Exception hierarchy."""


class BeamkitError(Exception):
    """Base class for all package errors."""


class NumericalError(BeamkitError, ArithmeticError):
    """A linear-algebra step collapsed (singular system, non-positive denominator)."""


class ConvergenceError(NumericalError):
    """An iterative routine did not reach its tolerance."""


class ConfigError(BeamkitError, ValueError):
    """A run or scene configuration violates one of its invariants."""


class FormatError(BeamkitError, ValueError):
    """A mask or steering file is malformed."""
