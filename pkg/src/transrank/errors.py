"""Exception hierarchy shared by every module of the package."""


class TransrankError(Exception):
    """Base class for all package errors."""


class ShapeError(TransrankError, ValueError):
    """An input or parameter tensor has the wrong shape."""


class DomainError(TransrankError, ValueError):
    """A value lies outside the domain of an operation (empty logits, bad label)."""


class ConfigError(TransrankError, ValueError):
    """Invalid configuration: unknown architecture, bad counts, colliding roles."""


class UsageError(TransrankError, ValueError):
    """An operation was called with arguments that violate its contract."""


class InvariantError(TransrankError, AssertionError):
    """A post-condition check failed (e.g. a perturbation left its budget)."""


# weight / adversarial-set files

class PersistenceError(TransrankError, OSError):
    pass


class BadMagicError(PersistenceError):
    pass


class VersionMismatchError(PersistenceError):
    pass


class TruncatedFileError(PersistenceError):
    pass


# IDX ingestion

class IDXError(TransrankError, ValueError):
    pass


class IDXMagicError(IDXError):
    pass


class IDXDimensionError(IDXError):
    pass


class IDXCountError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass
