"""Exception hierarchy shared across the package."""


class ConflictGateError(Exception):
    """Base class for all package errors."""


class DomainError(ConflictGateError, ValueError):
    """An elementary op was evaluated outside its domain."""


class ConfigError(ConflictGateError, ValueError):
    pass


class NumericalError(ConflictGateError, ArithmeticError):
    pass


class ParseError(ConflictGateError, ValueError):
    pass


class ValidationError(ConflictGateError, ValueError):
    pass


class EmptyDataset(ConflictGateError, ValueError):
    pass


class DimensionMismatch(ConflictGateError, ValueError):
    pass


class ZeroVector(ConflictGateError, ValueError):
    pass


class ModeError(ConflictGateError, ValueError):
    """A theory check was requested on a trace that cannot support it."""
