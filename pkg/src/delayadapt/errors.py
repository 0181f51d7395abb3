"""Exception types raised by the package.

Every error carries enough context to be acted on without re-running
(the offending line, the required capacity, ...).
"""


class DelayAdaptError(Exception):
    """Base class for all package errors."""


class DimensionError(DelayAdaptError, ValueError):
    pass


class LabelError(DelayAdaptError, ValueError):
    pass


class ConfigError(DelayAdaptError, ValueError):
    pass


class DelayError(DelayAdaptError, ValueError):
    """A delay outside ``[0, k]`` or an exhausted delay trace."""


class CapacityError(DelayAdaptError, ValueError):
    """A delay reaches further back than the iterate ring buffer holds."""

    def __init__(self, delay, capacity):
        self.delay = delay
        self.capacity = capacity
        self.required = delay + 1
        super().__init__(
            f"delay {delay} exceeds ring capacity {capacity}; "
            f"need H >= {self.required}"
        )


class ParseError(DelayAdaptError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


class SequenceError(DelayAdaptError, ValueError):
    """Malformed input to the sequence verifier."""


class WorkerError(DelayAdaptError, RuntimeError):
    """A worker thread failed; the run was aborted."""
