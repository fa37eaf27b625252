"""Exception hierarchy shared by every semcache module."""


class SemcacheError(Exception):
    """Base class for all errors raised by semcache."""


class EmptyQuery(SemcacheError, ValueError):
    pass


class EmptyResponse(SemcacheError, ValueError):
    pass


class DimensionMismatch(SemcacheError, ValueError):
    pass


class ZeroVector(SemcacheError, ValueError):
    pass


class ProviderFailure(SemcacheError, RuntimeError):
    """An external embedding provider could not produce a vector."""


class EmptyBatch(SemcacheError, ValueError):
    pass


class BatchTooSmall(SemcacheError, ValueError):
    pass


class InsufficientData(SemcacheError, ValueError):
    pass


class TooFewSamples(SemcacheError, ValueError):
    pass


class KTooLarge(SemcacheError, ValueError):
    pass


class DegenerateData(SemcacheError, ValueError):
    pass


class UnknownEntry(SemcacheError, KeyError):
    pass


class IoFailure(SemcacheError, OSError):
    pass


class CorruptFile(SemcacheError, ValueError):
    pass


class VersionUnsupported(SemcacheError, ValueError):
    pass


class EmptyInput(SemcacheError, ValueError):
    pass


class InsufficientLabels(SemcacheError, ValueError):
    pass


class EmptyUpdates(SemcacheError, ValueError):
    pass


class LengthMismatch(SemcacheError, ValueError):
    pass


class EmptyCounts(SemcacheError, ValueError):
    pass


class EmptyBase(SemcacheError, ValueError):
    pass


class UpstreamUnreachable(SemcacheError, ConnectionError):
    pass


class UpstreamBadStatus(SemcacheError, RuntimeError):
    def __init__(self, code: int, message: str = ""):
        super().__init__(f"upstream returned HTTP {code}" + (f": {message}" if message else ""))
        self.code = code
