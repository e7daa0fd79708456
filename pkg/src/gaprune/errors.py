"""Exception hierarchy shared by every gaprune module."""


class GaPError(Exception):
    """Base class for all errors raised by gaprune."""


class ShapeError(GaPError, ValueError):
    """Array shapes or dimensions do not line up."""


class NumericError(GaPError, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class UsageError(GaPError, RuntimeError):
    """An API was called out of order or with inconsistent arguments."""


class ConfigError(GaPError, ValueError):
    """A configuration value is invalid or out of range."""


class FormatError(GaPError, ValueError):
    """A binary file or message does not follow its format."""


class ProtocolError(GaPError, RuntimeError):
    """A coordinator/worker exchange broke the message contract."""


class StepAbort(GaPError, RuntimeError):
    """A training step was aborted; ``step`` names the step index."""

    def __init__(self, step, reason):
        super().__init__(f"step {step}: {reason}")
        self.step = step
        self.reason = reason
