class RejectedInputError(ValueError):
    """Input violates an operation's contract."""


class AlignmentError(RejectedInputError):
    """Per-frame tracks disagree in length by more than the tolerated slack."""


class ConfigurationError(RuntimeError):
    """Missing checkpoint, bad config key, or incompatible saved state."""


class NumericError(ArithmeticError):
    """A matrix stayed singular after regularization."""
