"""Exception hierarchy shared by every module."""


class RayletError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(RayletError, ValueError):
    pass


class PixelRangeError(RayletError, IndexError):
    pass


class InsufficientPointsError(RayletError, ValueError):
    pass


class DegenerateRadiusError(RayletError, ValueError):
    """Two points of a cloud coincide, so a virtual ball would have radius 0."""


class DegenerateGaussianError(RayletError, ValueError):
    pass


class ShapeError(RayletError, ValueError):
    pass


class NoSupervisionError(RayletError, RuntimeError):
    """Every training ray was discarded for lack of raylet candidates."""


class ConstantPredictionError(RayletError, ValueError):
    pass


class EmptyInputError(RayletError, ValueError):
    pass


class ParseError(RayletError, ValueError):
    """Malformed file. ``offset`` is the byte position where decoding failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset
