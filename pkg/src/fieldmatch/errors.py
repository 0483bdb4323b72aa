"""Exception types raised across fieldmatch.

The CLI maps each family onto an exit code: invalid input -> 2,
terminal case -> 3, numerical failure -> 4.
"""


class FieldMatchError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class InvalidArgumentError(FieldMatchError, ValueError):
    exit_code = 2


class NumericalError(FieldMatchError):
    exit_code = 4


class NotPositiveDefiniteError(NumericalError):
    """Cholesky failed even after the largest allowed jitter."""

    def __init__(self, message, pivot=None, jitter=None):
        super().__init__(message)
        self.pivot = pivot
        self.jitter = jitter


class DegenerateEnsembleError(NumericalError):
    pass


class IllConditionedProjectionError(NumericalError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ConstraintInfeasibleError(NumericalError):
    pass


class SingularCorrelationError(NumericalError):
    pass


class FitFailureError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NormMismatchError(FieldMatchError):
    """The fast implausibility was asked to run with W != Sigma_e + Sigma_eta."""

    exit_code = 2


class TerminalCaseError(FieldMatchError):
    """The truncated basis cannot represent z well enough for any x to survive."""

    exit_code = 3

    def __init__(self, message, r_w=None, threshold=None):
        super().__init__(message)
        self.r_w = r_w
        self.threshold = threshold


class MatrixFormatError(FieldMatchError, ValueError):
    exit_code = 2

    def __init__(self, message, line=None, path=None):
        if line is not None:
            message = f"{path or '<matrix>'}:{line}: {message}"
        super().__init__(message)
        self.line = line
        self.path = path


class ConfigError(InvalidArgumentError):
    pass
