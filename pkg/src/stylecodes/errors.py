"""Exception hierarchy shared by every stylecodes module."""


class StylecodesError(Exception):
    """Base class for all library errors."""


class DimensionError(StylecodesError, ValueError):
    """Tensor shapes do not line up."""


class ConfigError(StylecodesError, ValueError):
    """A configuration value is out of its allowed range."""


class UsageError(StylecodesError, RuntimeError):
    """An API was called in a way its contract forbids."""


class ValidationError(StylecodesError, ValueError):
    """Input data failed validation (NaN, out of range, ...)."""


class OracleError(StylecodesError, ArithmeticError):
    """The finite-difference oracle evaluated a non-finite value."""


class FormatError(ValidationError):
    """A stylecode string is syntactically malformed.

    Exactly one of ``length`` or ``position`` is set: ``length`` for a wrong
    total length, ``position``/``char`` for the first illegal character.
    """

    def __init__(self, message, *, length=None, position=None, char=None):
        super().__init__(message)
        self.length = length
        self.position = position
        self.char = char


class VersionMismatch(StylecodesError):
    """A stylecode (or checkpoint) targets a different decoder version."""

    def __init__(self, found, expected):
        super().__init__(f"stylecode version {found} does not match decoder version {expected}")
        self.found = found
        self.expected = expected


class CheckpointError(StylecodesError):
    """A checkpoint file is corrupt, incomplete, or incompatible."""


class TrainingAborted(StylecodesError):
    """Training stopped on NaN loss or divergence."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FrozenParameterError(UsageError):
    """Frozen parameters were handed to an optimizer."""
