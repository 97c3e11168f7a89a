"""Exception types shared across the package."""


class DocSegTrError(Exception):
    """Base class for all package errors."""


class ShapeError(DocSegTrError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DocSegTrError, ValueError):
    """A configuration value violates a module constraint."""


class TapeError(DocSegTrError, RuntimeError):
    """Backward was requested on something without a recorded graph."""


class ContractError(DocSegTrError, RuntimeError):
    """A documented precondition was violated by the caller."""


class NumericError(DocSegTrError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(DocSegTrError, ValueError):
    """A file or record does not follow its documented format."""
