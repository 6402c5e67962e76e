"""Exception types shared across the package."""


class ProsmaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ProsmaError, ValueError):
    """Operand extents are incompatible with an operation."""


class ContractError(ProsmaError, ValueError):
    """A documented precondition was violated."""


class FormatError(ProsmaError, ValueError):
    """A file could not be parsed (PGM image, checkpoint)."""
