"""Exception hierarchy shared by all subpackages."""


class FlowIARError(Exception):
    """Base class for every error raised by flowiar."""


class SchemaError(FlowIARError, ValueError):
    """An observation, action or config does not have the expected shape."""


class NumericalError(FlowIARError, ArithmeticError):
    """A non-finite value appeared inside a computation."""


class CapacityError(FlowIARError):
    """An operation would need to enumerate too many actions."""


class StarvationError(FlowIARError):
    """Rejection sampling found no valid action within its retry budget."""

    def __init__(self, message, state=None, total_drawn=0):
        super().__init__(message)
        self.state = state
        self.total_drawn = total_drawn


class ContractViolation(FlowIARError):
    """A caller broke a documented precondition (e.g. stepping with an invalid action)."""


class ConfigError(FlowIARError, ValueError):
    """Invalid experiment, training or environment configuration."""

    def __init__(self, message, path=None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class TrainingAborted(FlowIARError):
    """Training stopped early; ``history`` and ``updates`` hold whatever was logged so far."""

    def __init__(self, message, history=None, cause=None, updates=None, checkpoint=None):
        super().__init__(message)
        self.history = history
        self.cause = cause
        self.updates = updates
        self.checkpoint = checkpoint
