"""Exception types shared across the toolkit."""


class EdaDiarError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(EdaDiarError):
    """Operands have incompatible shapes."""


class InputEmpty(EdaDiarError):
    """An operation received an empty waveform / matrix."""


class ConfigInvalid(EdaDiarError):
    """A configuration value is out of its legal range."""


class SpecInfeasible(EdaDiarError):
    """A mixture specification cannot be satisfied (e.g. overlap with one speaker)."""


class TooManySpeakers(EdaDiarError):
    """Exhaustive permutation search requested above the hard cap."""


class DivergenceError(EdaDiarError):
    """Training produced a non-finite loss."""


class CheckpointIncompatible(EdaDiarError):
    """Checkpoint metadata does not match the requested model configuration."""


class ParseError(EdaDiarError):
    """A structured text file (RTTM, config) is malformed."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class UndefinedDER(EdaDiarError):
    """DER is undefined because the reference contains no scored speech."""


class EmptyDiarization(EdaDiarError):
    """Zero speakers were detected; the caller should emit an empty hypothesis."""


# I/O failures are reported with the standard OS error type.
IoError = OSError
