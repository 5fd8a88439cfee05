"""Error taxonomy shared by all pipeline stages.

Each class maps to a CLI exit code: validation problems exit 2,
numerical failures exit 3, missing inputs exit 4.
"""


class HgramaError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ValidationError(HgramaError):
    """Malformed or inconsistent inputs (bad dims, broken invariants)."""

    exit_code = 2


class NumericalError(HgramaError):
    """Numerical failure, e.g. a singular solve at lambda = 0."""

    exit_code = 3


class MissingInputError(HgramaError):
    """A required file or directory does not exist."""

    exit_code = 4
