"""Exception types raised across the package."""


class DidbError(Exception):
    """Base class for every error raised by didb."""


# core
class InvalidField(DidbError, ValueError):
    pass


class FieldContainsSeparator(InvalidField):
    pass


class InvalidDate(InvalidField):
    pass


class RecordParseError(DidbError, ValueError):
    pass


class BadLength(RecordParseError):
    pass


class BadPrefix(RecordParseError):
    pass


class BadDigestAlphabet(RecordParseError):
    pass


# store
class UnsortedInput(DidbError, ValueError):
    pass


class DuplicateRecord(DidbError, ValueError):
    pass


class IoFailure(DidbError, OSError):
    pass


class InsufficientSpace(IoFailure):
    pass


class ManifestMissing(DidbError):
    pass


class ManifestMalformed(DidbError, ValueError):
    pass


class StoreNotLoaded(DidbError):
    pass


class ValidationFailed(DidbError):
    def __init__(self, message, corrupt=()):
        super().__init__(message)
        self.corrupt = list(corrupt)


class StaleVersion(DidbError):
    pass


# builder
class InputUnreadable(DidbError):
    pass


class AllRowsInvalid(DidbError):
    pass


# protocol
class ProtocolError(DidbError, ValueError):
    pass


class MalformedLine(ProtocolError):
    pass


class BadParameter(MalformedLine):
    pass


class MalformedFrame(ProtocolError):
    pass


class LengthMismatch(MalformedFrame):
    pass


# client
class AllNodesFailed(DidbError):
    def __init__(self, message, attempts=()):
        super().__init__(message)
        self.attempts = list(attempts)


class EmptyNodeList(DidbError):
    pass


# simnet
class SimTimeout(DidbError, TimeoutError):
    pass
