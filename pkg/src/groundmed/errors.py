"""Exception hierarchy shared across the package."""


class GroundMedError(Exception):
    """Base class for all package errors."""


class ShapeError(GroundMedError, ValueError):
    pass


class DegenerateGeometryError(GroundMedError, ValueError):
    pass


class CapacityError(GroundMedError, ValueError):
    pass


class ConfigError(GroundMedError, ValueError):
    pass


class InputError(GroundMedError, ValueError):
    pass


class ProtocolError(GroundMedError, ValueError):
    pass


class MalformedResponseError(ProtocolError):
    """Unbalanced or nested bracket tokens in a generated response.

    ``index`` is the offending token position and ``plain_text`` a best-effort
    detokenization with all special tokens removed.
    """

    def __init__(self, message: str, index: int, plain_text: str = ""):
        super().__init__(f"{message} (token {index})")
        self.index = index
        self.plain_text = plain_text


class SpanLayoutError(ProtocolError):
    pass


class NumericError(GroundMedError, ArithmeticError):
    pass


class BackendError(GroundMedError):
    """Retryable transport failure talking to a text-completion backend."""


class CleaningError(GroundMedError):
    pass
