"""Exception hierarchy.

Everything raised on purpose by the package derives from ``IrPipeError`` so
the CLI can map domain failures to exit code 3 in one place.
"""


class IrPipeError(Exception):
    """Base class for all domain errors."""


class InvalidFrame(IrPipeError, ValueError):
    """A frame or stack violates its invariants."""


# file formats
class MalformedHeader(IrPipeError):
    pass


class TruncatedPayload(IrPipeError):
    pass


class DepthOverflow(IrPipeError):
    pass


class DepthMismatch(IrPipeError):
    pass


class IoFailure(IrPipeError):
    pass


# calibration / correction
class DimensionMismatch(IrPipeError, ValueError):
    pass


class TooFewFrames(IrPipeError, ValueError):
    pass


class TooManyBadPixels(IrPipeError):
    pass


class DegenerateAmbient(IrPipeError, ValueError):
    pass


class InvalidSetpoints(IrPipeError, ValueError):
    pass


class ModeMismatch(IrPipeError, ValueError):
    pass


# stages / pipeline
class InvalidParams(IrPipeError, ValueError):
    pass


class StateParamMismatch(IrPipeError):
    pass


class ConfigInvalid(IrPipeError):
    """Configuration rejected; ``line`` is set when it came from a file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
