"""Exception hierarchy shared by every qkvcomm module."""


class QKVError(Exception):
    """Base class for all library errors."""


class InvalidInput(QKVError, ValueError):
    """Caller supplied a value that violates an operation's preconditions."""


class InvalidSpec(InvalidInput):
    pass


class EmptyInput(InvalidInput):
    """Empty tensor, cache, attention map, calibration set or text."""


class NonFiniteInput(InvalidInput):
    pass


class LengthMismatch(InvalidInput):
    pass


class DimensionMismatch(InvalidInput):
    pass


class ModeMismatch(InvalidInput):
    pass


class CodeOutOfRange(InvalidInput):
    pass


class WordAbsent(InvalidInput, KeyError):
    pass


class OversizedEntry(InvalidInput):
    pass


class DiskIOFailure(QKVError, OSError):
    pass


class WireError(QKVError):
    """Base for every payload decoding/encoding failure."""


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class CrcMismatch(WireError):
    pass


class Truncated(WireError):
    pass


class MalformedLength(WireError):
    """A length, count or enumerated field is inconsistent with the data."""


class UnrepresentableField(WireError, ValueError):
    pass


class TransportFailure(QKVError, ConnectionError):
    pass


class FrameIncomplete(TransportFailure):
    pass
