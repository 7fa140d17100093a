"""Exception types shared across the package."""


class ClearsightError(Exception):
    """Base class for all package errors."""


class ValidationError(ClearsightError, ValueError):
    """Input violates a documented precondition or invariant."""


class DimensionError(ValidationError):
    """Array shapes disagree with the operation's contract."""


class ConfigurationError(ClearsightError, RuntimeError):
    """Missing or inconsistent configuration (checkpoints, providers, ...)."""
