"""Exception hierarchy shared by every triguard module."""


class TriGuardError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TriGuardError, ValueError):
    """Shapes are incompatible for the requested operation."""


class DomainError(TriGuardError, ValueError):
    """A numeric argument is outside the domain of the function."""


class ContractError(TriGuardError, ValueError):
    """A documented precondition of a public function was violated."""


class NonFiniteError(TriGuardError, FloatingPointError):
    """An operation produced NaN or Inf."""


class FormatError(TriGuardError, ValueError):
    """A file does not match its expected binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapabilityError(TriGuardError):
    """The model contains a layer the verifier cannot bound."""


class TrainingError(TriGuardError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None, batch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class UndefinedCorrelationError(TriGuardError, ValueError):
    """Pearson correlation requested for a zero-variance series."""


class ReportError(TriGuardError, ValueError):
    """A report could not be assembled from the given run outputs."""


class ConfigError(TriGuardError, ValueError):
    """Run configuration failed validation; `field` is a dotted path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
