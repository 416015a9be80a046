"""Exception types shared across the package."""


class LoopServeError(Exception):
    """Base class for all validation and contract errors raised here."""


class NonFiniteInput(LoopServeError):
    pass


class AllMaskedRow(LoopServeError):
    pass


class DimensionMismatch(LoopServeError):
    pass


class EmptyPlan(LoopServeError):
    pass


class InvalidConfig(LoopServeError):
    pass


class SequenceTooLong(LoopServeError):
    pass


class CacheCorrupt(LoopServeError):
    pass


class EmptyBlock(LoopServeError):
    pass


class InvalidAlpha(LoopServeError):
    pass


class InstanceTooLarge(LoopServeError):
    pass


class EmptyWindow(LoopServeError):
    pass


class SizeMismatch(LoopServeError):
    pass


class InvalidIds(LoopServeError):
    pass


class PoolTooSmall(LoopServeError):
    pass


class TooFewExamples(LoopServeError):
    pass
