class LlmsError(Exception):
    """Base class of every error raised by the context memory service."""


# model
class LengthError(LlmsError):
    pass


class WindowError(LlmsError):
    pass


class ConsistencyError(LlmsError):
    pass


# quantization / swap files
class NumericError(LlmsError):
    pass


class FormatError(LlmsError):
    pass


# planning
class PlanningError(LlmsError):
    pass


class ProfilingError(LlmsError):
    pass


# memory
class InsufficientMemoryError(LlmsError):
    """Claim would exceed the budget; the caller must reclaim first."""


class OutOfMemoryError(LlmsError):
    """Nothing evictable is left to satisfy a reclaim."""


class ContextError(LlmsError):
    pass


# service
class BusyError(LlmsError):
    pass


class NotFoundError(LlmsError):
    pass


class QuotaError(LlmsError):
    pass


class PolicyError(LlmsError):
    pass
