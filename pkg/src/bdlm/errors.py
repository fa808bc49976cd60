"""Exception types shared across the package.

Class names follow the error vocabulary of the module contracts; most are
thin ValueError subclasses so callers can catch broadly or precisely.
"""


class BdlmError(Exception):
    """Base class for every domain error raised by this package."""


class EmptyCorpus(BdlmError):
    pass


class TargetSizeTooSmall(BdlmError):
    pass


class IdOutOfRange(BdlmError):
    pass


class ParseError(BdlmError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class ConflictingLanguage(BdlmError):
    pass


class UnknownLanguage(BdlmError):
    pass


class NoMappableWords(BdlmError):
    pass


class OverlappingSpans(BdlmError):
    pass


class MissingPayload(BdlmError):
    def __init__(self, kind, message=None):
        super().__init__(message or f"no payload of kind {kind!r}")
        self.kind = kind


class SampleTooLong(BdlmError):
    pass


class EmptyDataset(BdlmError):
    pass


class SequenceTooLong(BdlmError):
    pass


class SoftPositionOutOfRange(BdlmError):
    pass


class AllPositionsPadded(BdlmError):
    pass


class ShapeMismatch(BdlmError):
    pass


class EmptyShards(BdlmError):
    pass


class DivergedLoss(BdlmError):
    pass


class ConfigMismatch(BdlmError):
    pass


class LengthMismatch(BdlmError):
    pass


class EmptyInput(BdlmError):
    pass


class IndexOutOfRange(BdlmError):
    pass
