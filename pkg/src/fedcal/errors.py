"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented invariant or precondition."""


class TaskMismatchError(ValidationError):
    """Operation applied to a dataset with the wrong task type."""


class ProtocolError(RuntimeError):
    """A federation message violates the round protocol."""


class TransportError(ProtocolError):
    """Network-level failure (refused, reset, premature close)."""


class RoundAbortedError(ProtocolError):
    """Round ended without a broadcast (timeout or agent failure)."""
