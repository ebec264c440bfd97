"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
numerical/estimation failures exit 3, and file IO or parse problems
exit 4.
"""
from __future__ import annotations


class LinkregError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LinkregError):
    """Invalid scenario, estimator, or study configuration."""


class DataError(LinkregError):
    """Dataset violates an integrity requirement (e.g. a reviewed
    record without a match decision, or a table that does not cover a
    cell present in the data)."""


class ParseError(LinkregError):
    """A file could not be parsed; carries a line number when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class NumericalError(LinkregError):
    """Base class for numerical failures during estimation."""


class SingularJacobianError(NumericalError):
    """Jacobian (or bread matrix) is numerically singular."""


class DivergenceError(NumericalError):
    """An estimating function produced non-finite values."""


class DegenerateCellError(NumericalError):
    """A covariate cell makes a required denominator vanish."""


class NoReviewedRecordsError(NumericalError):
    """Match-probability estimation is impossible without any
    clerically reviewed records."""
