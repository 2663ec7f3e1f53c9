"""Exception hierarchy shared by every module.

The CLI maps :class:`NumericalError` to exit code 3 and every other
:class:`JointDudoError` to exit code 2.
"""


class JointDudoError(Exception):
    """Base class for all package errors."""


class ValidationError(JointDudoError, ValueError):
    """Input data violates a precondition (NaN, negative counts, bad range)."""


class ConfigurationError(JointDudoError, ValueError):
    """An experiment, geometry or model configuration is inconsistent."""


class ShapeError(ValidationError):
    """Tensor shapes do not match what the operation expects."""


class DegenerateInputError(ValidationError):
    """Statistical input carries no information (e.g. zero-variance differences)."""


class NumericalError(JointDudoError, ArithmeticError):
    """A NaN or divergence was produced during an iterative computation."""
