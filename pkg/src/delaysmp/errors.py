"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``InvalidInputError`` and its
subclasses give 2, ``NumericalAbort`` gives 3.
"""


class DelaySMPError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(DelaySMPError, ValueError):
    """Input data violates a documented precondition."""


class AlignmentError(InvalidInputError):
    """A measure atom or time point does not sit on the time grid."""


class PreconditionError(InvalidInputError):
    """A structural precondition of an operation is violated."""


class ConfigError(InvalidInputError):
    """An experiment configuration failed to parse or validate."""


class NumericalAbort(DelaySMPError, RuntimeError):
    """A solver diverged, produced non-finite values, or hit a singular matrix."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
