"""
Error types raised across the super-resolution app.

Each error also subclasses the closest built-in so callers that only know
about ``ValueError`` and friends keep working.
"""


class SuperResError(Exception):
    """Base class for every error raised by the app."""


class InvalidRangeError(SuperResError, ValueError):
    """A parameter lies outside its documented range."""


class OutOfRangeError(SuperResError, IndexError):
    """An index lies outside the addressed sequence."""


class ShapeMismatchError(SuperResError, ValueError):
    """Tensor shapes disagree with the operation's contract."""


class DivisibilityError(ShapeMismatchError):
    """Spatial dims are not divisible by a required factor."""


class ChannelCountError(ShapeMismatchError):
    """An image does not have the expected number of channels."""


class ImageTooSmallError(ShapeMismatchError):
    """An image is smaller than a window or receptive field."""


class NumericError(SuperResError, FloatingPointError):
    """A value is non-finite or outside the domain of a formula."""


class ZeroNormError(NumericError):
    """A vector with zero norm was passed where a direction is needed."""


class NonFiniteLossError(NumericError):
    """Training produced a non-finite loss; ``report`` holds the terms."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class AdapterTargetError(SuperResError, ValueError):
    """An adapter spec targets a component that must stay frozen."""


class EmptyDatasetError(SuperResError, ValueError):
    """A dataset directory or manifest holds no usable images."""


class MissingCounterpartError(SuperResError, ValueError):
    """Paired directories do not match; ``offenders`` lists the names."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class ConfigError(SuperResError, ValueError):
    """A configuration file or flag is invalid; ``key`` names the culprit."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
