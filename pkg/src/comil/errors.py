"""Exception hierarchy shared across the package."""


class ComilError(Exception):
    """Base class for all package errors."""


class ShapeError(ComilError, ValueError):
    """Array dimensions do not agree."""


class ContractError(ComilError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(ComilError, ValueError):
    """A file or byte stream is malformed."""


class SpecError(ComilError, ValueError):
    """A synthetic dataset specification cannot be realised."""


class OracleError(ComilError, ArithmeticError):
    """A finite-difference probe produced a non-finite value."""


class DivergenceError(ComilError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, bag_id=None):
        super().__init__(message)
        self.epoch = epoch
        self.bag_id = bag_id
