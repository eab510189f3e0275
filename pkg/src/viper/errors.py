"""Exception types shared across the package."""


class ViperError(Exception):
    """Base class for all package errors."""


class ConfigError(ViperError, ValueError):
    """Invalid configuration or hyperparameter."""


class DomainError(ViperError, ValueError):
    """An argument lies outside the domain of the operation."""


class FormatError(ViperError, ValueError):
    """Malformed file contents.

    Carries the offending path and byte offset when known.
    """

    def __init__(self, message, path=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
        self.path = path
        self.offset = offset


class NumericError(ViperError, ArithmeticError):
    """Divergence, non-finite values or failed factorization."""

    def __init__(self, message, iteration=None, context=None):
        details = []
        if iteration is not None:
            details.append(f"iteration={iteration}")
        if context:
            details.extend(f"{k}={v}" for k, v in context.items())
        super().__init__(message + (f" ({', '.join(details)})" if details else ""))
        self.iteration = iteration
        self.context = dict(context or {})
