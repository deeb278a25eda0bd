"""Exception types shared across the package.

Each maps to a distinct CLI exit code, see cli.EXIT_CODES.
"""


class CdrLabError(Exception):
    """Base class for all package errors."""


class ConfigError(CdrLabError):
    """Invalid configuration value or combination."""


class ShapeError(CdrLabError):
    """Operand dimensions do not line up."""


class NumericError(CdrLabError):
    """Non-finite values where finite ones are required."""


class DegenerateInputError(CdrLabError):
    """Input too close to a degenerate configuration (e.g. zero-norm row)."""


class ContractViolation(CdrLabError):
    """A documented precondition was broken by the caller."""


class AlignmentError(CdrLabError):
    """Paired inputs are mismatched or a pair link is broken."""


class UnknownIdError(CdrLabError):
    """An instance id is missing from a lookup table."""


class DivergenceError(CdrLabError):
    """Training produced non-finite gradients or losses."""


class DataError(CdrLabError):
    """Malformed data or result files."""
