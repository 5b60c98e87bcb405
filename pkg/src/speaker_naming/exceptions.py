"""Exception types raised across the package."""


class SpeakerNamingError(Exception):
    """Base class for all package errors."""


class DimensionError(SpeakerNamingError, ValueError):
    """Operand shapes are incompatible."""


class NumericalError(SpeakerNamingError, ArithmeticError):
    """A computation produced a non-finite value."""


class InputTooShortError(SpeakerNamingError, ValueError):
    """A waveform is shorter than one analysis window."""


class InsufficientFramesError(SpeakerNamingError, ValueError):
    """Too few frames to compute utterance statistics."""


class LabelError(SpeakerNamingError, ValueError):
    """Targets or labels are malformed (not one-hot, single class, ...)."""


class ConsistencyError(SpeakerNamingError, ValueError):
    """Parameters, gradients, traces or models do not belong together."""


class DivergenceError(SpeakerNamingError, ArithmeticError):
    """Training produced a non-finite loss."""


class UnsupportedFormatError(SpeakerNamingError, ValueError):
    """A file uses a format variant this package does not read."""


class ParseError(SpeakerNamingError, ValueError):
    """A file is truncated or malformed."""


class ManifestError(SpeakerNamingError, ValueError):
    """A manifest line is malformed or breaks referential integrity."""


class DataError(SpeakerNamingError, ValueError):
    """A dataset does not satisfy the requirements of an operation."""


class UsageError(SpeakerNamingError, ValueError):
    """An operation was called with an invalid combination of arguments."""


class EvaluationError(SpeakerNamingError, ValueError):
    """Results cannot be scored against the given ground truth."""
