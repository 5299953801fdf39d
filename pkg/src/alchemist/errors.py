"""Exception hierarchy and wire-level error codes shared by server and clients."""
from __future__ import annotations

from enum import IntEnum


class AlchemistError(Exception):
    """Base class for all errors raised by this package."""


# ---------------------------------------------------------------------------
# Layout errors (pure math, never cross the wire directly)

class InvalidGridError(AlchemistError, ValueError):
    """Process grid construction failed (bad worker count or row forcing)."""


class InvalidLayoutError(AlchemistError, ValueError):
    """Distribution pair is not one of the legal non-redundant layouts."""


class NotLocalError(AlchemistError, ValueError):
    """A coordinate was mapped through a rank that does not own it."""


class InvalidPartitioningError(AlchemistError, ValueError):
    """Row ranges overlap or fail to cover the matrix."""


class InvalidSourceError(AlchemistError, ValueError):
    """A blocked or row-partitioned source does not tile its matrix."""


# ---------------------------------------------------------------------------
# Wire / framing errors

class ProtocolError(AlchemistError):
    """Malformed or illegal wire data."""


class FrameTooLargeError(ProtocolError):
    """Frame would exceed the negotiated buffer size."""


class IncompleteFrameError(ProtocolError):
    """Input ends before the advertised frame length."""


class VersionMismatchError(ProtocolError):
    """Peer speaks a different protocol version."""


class DecodeError(ProtocolError):
    """Unknown command/tag or inconsistent payload."""


class InvalidBufferError(ProtocolError, ValueError):
    """Buffer size too small to carry a frame header plus block metadata."""


# ---------------------------------------------------------------------------
# Gateway faults: raised server-side, serialized as ERROR frames, re-raised
# client-side from the code below.

class ErrorCode(IntEnum):
    VERSION_MISMATCH = 1
    FRAME_TOO_LARGE = 2
    BAD_REQUEST = 3
    BUFFER_TOO_SMALL = 4
    OUT_OF_WORKERS = 5
    LIBRARY_NOT_FOUND = 6
    INVALID_LAYOUT = 7
    STALE_SESSION = 8
    STALE_HANDLE = 9
    OWNERSHIP_VIOLATION = 10
    NOT_READY = 11
    UNKNOWN_FUNCTION = 12
    DIMENSION_MISMATCH = 13
    INVALID_ACTION = 14
    INVALID_ARGUMENT = 15
    NOT_LOCAL = 16


class GatewayError(AlchemistError):
    """A fault reported by (or destined for) the gateway."""

    code: ErrorCode = ErrorCode.BAD_REQUEST

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)


class VersionRejectedError(GatewayError):
    code = ErrorCode.VERSION_MISMATCH


class RemoteFrameTooLargeError(GatewayError):
    code = ErrorCode.FRAME_TOO_LARGE


class BadRequestError(GatewayError):
    code = ErrorCode.BAD_REQUEST


class BufferTooSmallError(GatewayError):
    code = ErrorCode.BUFFER_TOO_SMALL


class OutOfWorkersError(GatewayError):
    code = ErrorCode.OUT_OF_WORKERS


class LibraryNotFoundError(GatewayError):
    code = ErrorCode.LIBRARY_NOT_FOUND


class RemoteInvalidLayoutError(GatewayError):
    code = ErrorCode.INVALID_LAYOUT


class StaleSessionError(GatewayError):
    code = ErrorCode.STALE_SESSION


class StaleHandleError(GatewayError):
    code = ErrorCode.STALE_HANDLE


class OwnershipViolationError(GatewayError):
    code = ErrorCode.OWNERSHIP_VIOLATION


class NotReadyError(GatewayError):
    code = ErrorCode.NOT_READY


class UnknownFunctionError(GatewayError):
    code = ErrorCode.UNKNOWN_FUNCTION


class DimensionMismatchError(GatewayError):
    code = ErrorCode.DIMENSION_MISMATCH


class InvalidActionError(GatewayError):
    code = ErrorCode.INVALID_ACTION


class InvalidArgumentError(GatewayError):
    code = ErrorCode.INVALID_ARGUMENT


class RemoteNotLocalError(GatewayError):
    code = ErrorCode.NOT_LOCAL


class GatewayStartupError(AlchemistError):
    """Gateway could not bind its port range."""


_CODE_TO_CLASS = {cls.code: cls for cls in GatewayError.__subclasses__()}


def error_for_code(code: int, message: str) -> GatewayError:
    """Build the exception matching a wire error code (generic on unknowns)."""
    cls = _CODE_TO_CLASS.get(code)
    if cls is None:
        err = GatewayError(f"error code {code}: {message}")
        return err
    return cls(message)
