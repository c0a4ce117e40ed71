"""
Exception hierarchy shared by every mtcp module.

The CLI maps these onto its EXIT_* codes; library code
only raises.
"""


class MtcpError(Exception):
    """Base class for every error raised by the mtcp modules."""


class ShapeError(MtcpError, ValueError):
    """Tensor dimensions do not agree."""


class ConfigurationError(MtcpError, ValueError):
    """An operation or run was configured with invalid values."""


class DomainError(MtcpError, ValueError):
    """A value lies outside the domain an operation accepts (labels, weights)."""


class NumericError(MtcpError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class StateError(MtcpError, RuntimeError):
    """An operation was called in a state that does not support it."""


class CheckpointError(MtcpError, IOError):
    """A checkpoint file is malformed or from an incompatible version."""


class DatasetError(MtcpError, IOError):
    """A dataset dump file is malformed."""
