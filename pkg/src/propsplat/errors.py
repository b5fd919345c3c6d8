"""Exception hierarchy shared across the package."""


class PropSplatError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PropSplatError, ValueError):
    pass


class DegenerateSegmentError(InvalidArgumentError):
    """Raised when a link has coincident endpoints."""


class FrequencyMismatchError(PropSplatError, ValueError):
    def __init__(self, model_hz: float, query_hz: float):
        self.model_hz = model_hz
        self.query_hz = query_hz
        super().__init__(
            f"frequency mismatch: model serves {model_hz:g} Hz, query is {query_hz:g} Hz"
        )


class SchemaError(PropSplatError, ValueError):
    """Malformed measurement input. ``problems`` lists (line, column, message)."""

    def __init__(self, problems):
        self.problems = list(problems)
        head = "; ".join(
            f"line {line}, column {col!r}: {msg}" for line, col, msg in self.problems[:5]
        )
        more = f" (+{len(self.problems) - 5} more)" if len(self.problems) > 5 else ""
        super().__init__(head + more)


class ModelFileError(PropSplatError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class NonFiniteGradientError(PropSplatError, FloatingPointError):
    def __init__(self, group: str):
        self.group = group
        super().__init__(f"non-finite gradient in parameter group {group!r}")
