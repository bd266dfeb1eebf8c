"""Exception hierarchy shared by every wisca module."""


class WiscaError(Exception):
    """Base class for all library errors."""


class ShapeError(WiscaError, ValueError):
    """Operand dimensions are incompatible."""


class DomainError(WiscaError, ValueError):
    """An argument lies outside the operation's domain."""


class NumericError(WiscaError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class PlanError(WiscaError, ValueError):
    """A scale plan does not fit the weights it is applied to."""


class PreconditionError(WiscaError, ValueError):
    """A documented precondition of an operation does not hold."""


class StructuralInequivalenceError(WiscaError):
    """Two models differ in architecture (output shapes), not just in values."""


class CheckpointParseError(WiscaError):
    """Base class for malformed safetensors containers."""


class HeaderLengthError(CheckpointParseError):
    pass


class HeaderJSONError(CheckpointParseError):
    pass


class OffsetError(CheckpointParseError):
    pass


class DTypeError(CheckpointParseError):
    pass


class ResolutionError(WiscaError):
    """A layout descriptor does not bind to the checkpoint."""
