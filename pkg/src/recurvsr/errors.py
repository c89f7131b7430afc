"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/contract problems exit 2,
runtime failures exit 1.
"""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class DimensionError(ValueError):
    """Array shapes that do not line up (indivisible sizes, mismatched frames)."""


class ContractError(ValueError):
    """A call violated an operation's precondition (window length, index range...)."""


class ClipIOError(OSError):
    """Failed to read or write a clip directory or flow file."""

    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class TrainingError(RuntimeError):
    """A loss went non-finite during optimization."""

    def __init__(self, message, term=None, step=None):
        super().__init__(message)
        self.term = term
        self.step = step
