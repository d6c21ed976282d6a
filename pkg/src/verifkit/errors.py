"""Exception hierarchy shared by all modules.

DataError covers malformed inputs and violated preconditions (CLI exit
code 2), NumericalError covers diverged or non-PSD numerics (exit code 3).
DataError subclasses ValueError so estimator-style callers can catch it
the way they would catch scikit-learn input validation failures.
"""


class VerifkitError(Exception):
    """Base class for all toolkit errors."""


class DataError(VerifkitError, ValueError):
    """Malformed input data or violated operation precondition."""


class ManifestError(DataError):
    """Manifest text that cannot be parsed or fails referential integrity.

    ``line`` is the 1-based offending line number, or None when the error
    is not tied to a single line.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(DataError):
    """Corrupt or truncated binary file."""


class NumericalError(VerifkitError):
    """Numerical failure: non-finite loss, non-PSD covariance update."""
