"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes or axes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class CapacityError(ContractError):
    """A sequence exceeds a configured capacity (e.g. document token budget)."""


class InputTooShortError(ContractError):
    """An utterance is too short to survive subsampling."""
