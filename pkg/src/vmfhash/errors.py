class VmfHashError(Exception):
    pass


class DomainError(VmfHashError, ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateResultant(VmfHashError, ArithmeticError):
    """Resultant vector too short to define a mean direction."""


class NearZeroEmbedding(VmfHashError, ArithmeticError):
    pass


class StaleTape(VmfHashError, RuntimeError):
    """Backward called with a tape recorded against different weights."""


class NumericalAbort(VmfHashError, RuntimeError):
    pass


class FormatError(VmfHashError, ValueError):
    """Malformed artifact file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
