"""Exception hierarchy shared across the package."""


class ProtoNCDError(Exception):
    """Base class for all package errors."""


class InvalidArgument(ProtoNCDError, ValueError):
    pass


class DegenerateInput(InvalidArgument):
    pass


class NumericalFailure(ProtoNCDError, ArithmeticError):
    pass


class FormatError(ProtoNCDError, ValueError):
    pass


class ValidationError(ProtoNCDError, ValueError):
    pass


class InvalidState(ProtoNCDError, RuntimeError):
    pass


class InitFailure(ProtoNCDError, RuntimeError):
    pass


class ConfigError(ProtoNCDError, ValueError):
    pass


class NumericalAbort(NumericalFailure):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
