"""Exception types raised across the package."""


class FormatError(ValueError):
    """Malformed input file; the message names the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """A computation produced non-finite or out-of-domain values."""


class StateError(RuntimeError):
    """An operation was called on a state that cannot support it."""


class TrainingError(RuntimeError):
    """Training diverged or failed to reach a required quality bar."""
