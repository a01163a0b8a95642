"""Exception types shared across the toolkit."""
from __future__ import annotations


class MosaicError(Exception):
    """Base class for all toolkit errors."""


class BuildError(MosaicError):
    """Invalid graph-template construction (duplicate ids, dangling refs, bad loops)."""


class InstantiationError(MosaicError):
    """Symbol bindings missing/invalid, or size constraints violated under a binding."""


class AnalysisError(MosaicError):
    """Liveness analysis failure (alias cycles, inconsistent storage groups)."""


class ValidationError(MosaicError):
    """A memory plan does not cover the lifetime table it claims to plan."""


class TooLarge(MosaicError):
    """Instance exceeds the exact planner's group-count limit."""


class ResourceError(MosaicError):
    """Virtual address-space reservation failed."""


class CapacityError(MosaicError):
    """Commit target exceeds the reservation, or a plan exceeds committed memory."""


class UsageError(MosaicError):
    """Allocator misuse, e.g. double free of a block handle."""


class InputError(MosaicError):
    """Malformed kernel inputs (bad mask indices, dimension mismatch)."""


class ParseError(MosaicError):
    """Malformed expression or file content."""


class ExecutionFault(MosaicError):
    """A plan-driven execution touched memory outside its assigned range or
    clobbered another live group."""

    def __init__(self, message: str, op: str = "", groups: tuple[str, ...] = ()):
        super().__init__(message)
        self.op = op
        self.groups = groups


class InfeasibleRunError(MosaicError):
    """A simulated run hit a step whose memory demand cannot fit the budget."""

    def __init__(self, message: str, step_index: int, floor: int = 0):
        super().__init__(message)
        self.step_index = step_index
        self.floor = floor
