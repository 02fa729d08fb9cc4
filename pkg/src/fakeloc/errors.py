"""Exception hierarchy shared by every module."""


class FakelocError(Exception):
    exit_code = 5


class ConfigurationError(FakelocError, ValueError):
    exit_code = 2


class ShapeError(FakelocError, ValueError):
    exit_code = 3


class DomainError(FakelocError, ValueError):
    exit_code = 3


class DataError(FakelocError, ValueError):
    exit_code = 3


class ManifestParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingArtifactError(FakelocError, FileNotFoundError):
    exit_code = 4
