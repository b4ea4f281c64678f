"""Exception types shared across the package."""


class DhalError(Exception):
    """Base class for package errors."""


class DimensionError(DhalError, ValueError):
    """Shapes that cannot be combined."""


class ContractError(DhalError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class DomainError(DhalError, ValueError):
    """An argument lies outside the support of a distribution."""


class DataError(DhalError, ValueError):
    """Malformed or inconsistent data or files."""


class CorruptFileError(DataError):
    """File content does not match its stored checksum or magic string."""


class ConfigError(DhalError, ValueError):
    """Invalid configuration values or keys."""


class NumericalError(DhalError, FloatingPointError):
    """A loss or tensor became non-finite."""

    def __init__(self, message: str, component: str | None = None):
        super().__init__(message)
        self.component = component
