"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or network dimensions do not chain."""


class StructureError(ValueError):
    """Graph structure violates an operation's precondition."""


class DomainError(ValueError):
    """Numeric input lies outside the domain an operation is exact on."""


class CapacityError(ValueError):
    """Problem is too large for an exact or dense routine."""


class TapeError(RuntimeError):
    """A gradient tape was used after being consumed."""
