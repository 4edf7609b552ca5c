"""Exception taxonomy shared across the engine.

CLI exit codes map onto these: config problems exit 2, data problems exit 3,
failed verification harnesses exit 4.
"""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but numerically degenerate (e.g. zero norm)."""


class ConfigError(ValueError):
    """Malformed or unknown configuration key/value."""


class StreamFormatError(RuntimeError):
    """Malformed stream or snapshot file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
