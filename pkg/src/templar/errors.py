"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2, ``ConfigError`` to 1 and
``InvariantViolation`` to 3.
"""


class TemplarError(Exception):
    pass


class ConfigError(TemplarError):
    pass


class DataError(TemplarError):
    pass


class InvariantViolation(TemplarError):
    pass


class DegenerateConfiguration(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class InsufficientData(DataError):
    pass


class ShapeMismatch(DataError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DimMismatch(DataError):
    pass


class InsufficientClasses(DataError):
    pass


class DegenerateProtocol(DataError):
    pass


class MissingMate(DataError):
    pass


class EmptyInput(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConsistencyError(DataError):
    def __init__(self, message, template_id=None):
        super().__init__(message)
        self.template_id = template_id


class FormatError(DataError):
    pass


class CorruptPayload(FormatError):
    pass
