class DiffNERError(Exception):
    """Base class for all library errors."""


class ValidationError(DiffNERError, ValueError):
    """An input violates a documented precondition."""


class ConfigurationError(DiffNERError, ValueError):
    """A configuration value is unknown or inconsistent."""
