"""Exception hierarchy shared by every module."""


class WellcastError(Exception):
    """Base class for all library errors."""


class SeriesError(WellcastError, ValueError):
    """Invalid or inconsistent time-series content."""


class ParseError(SeriesError):
    """A CSV row could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(SeriesError):
    """Missing or unexpected columns / channels."""


class GapError(SeriesError):
    """Timestamps are not on a strict 10-minute grid."""

    def __init__(self, message, timestamp=None):
        super().__init__(message)
        self.timestamp = timestamp


class ConfigError(WellcastError, ValueError):
    """Invalid configuration record."""

    def __init__(self, message, field=None, line=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field
        self.line = line


class ShapeError(WellcastError, ValueError):
    """Array shapes do not match the model or filter configuration."""


class TrainingDivergedError(WellcastError, FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class FilterError(WellcastError, FloatingPointError):
    """A filter step produced non-finite state or a singular innovation."""

    def __init__(self, message, step=None, member=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
        self.member = member


class StatsError(WellcastError, ValueError):
    """Degenerate input to a statistical routine."""
