"""Exception types shared across the toolkit."""


class VKDError(Exception):
    """Base class for errors raised by this package."""


class ManifestFormatError(VKDError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(VKDError, ValueError):
    pass


class EmptyDatasetError(VKDError, ValueError):
    pass


class ConfigurationError(VKDError, ValueError):
    pass


class BatchCompositionError(VKDError, ValueError):
    pass


class NumericError(VKDError, ArithmeticError):
    pass
