"""Exception types shared across the package."""


class OddkitError(Exception):
    """Base class for all package errors."""


class ValidationError(OddkitError, ValueError):
    """An argument or input violates a documented precondition."""


class ShapeError(ValidationError):
    """Operands have incompatible shapes."""


class NumericDomainError(OddkitError, ArithmeticError):
    """An operation was asked to evaluate outside its numeric domain (e.g. a zero-norm vector)."""


class ConfigurationError(OddkitError, ValueError):
    """A model, descriptor or run configuration is inconsistent."""


class ParseError(OddkitError, ValueError):
    """A document could not be parsed; ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class ReferentialIntegrityError(ParseError):
    """An annotation references an entity (image, category) that does not exist."""


class ExtractionError(OddkitError, ValueError):
    """A patch could not be extracted from an annotation."""


class TrainingError(OddkitError, RuntimeError):
    """Training halted, e.g. because the loss or a gradient became non-finite."""
