"""Exception hierarchy shared by the engine and the CLI."""


class SpikingDDError(Exception):
    """Base class for all engine errors."""


class ConfigError(SpikingDDError, ValueError):
    """Invalid configuration or arguments."""


class ShapeError(SpikingDDError, ValueError):
    """Array dimensions do not agree."""


class ParseError(SpikingDDError, ValueError):
    """Malformed event file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BoundsError(SpikingDDError, ValueError):
    """Event coordinates outside the declared sensor geometry."""


class CorruptArtifactError(SpikingDDError):
    """Checkpoint failed its magic or CRC check."""


class TrainingError(SpikingDDError, RuntimeError):
    """Non-finite loss or gradient during training."""
