"""Error types raised across the package."""


class BssdError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BssdError, ValueError):
    """An argument has the wrong shape, range or content."""


class InvalidConfigError(BssdError, ValueError):
    """A configuration value is inconsistent or out of range."""


class UndefinedInputError(InvalidInputError):
    """The input carries no information the operation can use (e.g. all zeros)."""
