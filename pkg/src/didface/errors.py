"""Exception types shared across the package."""


class DidFaceError(Exception):
    """Base class for all package errors."""


class ParameterError(DidFaceError, ValueError):
    """An argument is outside its documented range."""


class ShapeError(DidFaceError, ValueError):
    """Tensor or image dimensions do not match the expected layout."""


class DomainError(DidFaceError, ValueError):
    """A value lies outside the domain of a mathematical function."""


class ConfigurationError(DidFaceError):
    """A required artifact (checkpoint, stats, dataset) is missing or inconsistent."""


class ValidationError(DidFaceError, ValueError):
    """A configuration file contains an unknown key or an invalid value."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
