"""Exception hierarchy shared by every fedsplit module."""


class FedSplitError(Exception):
    """Base class for all library errors."""


class ParseError(FedSplitError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDatasetError(FedSplitError):
    pass


class DegenerateDatasetError(FedSplitError):
    pass


class SplitInfeasibleError(FedSplitError):
    pass


class TooFewUsersError(FedSplitError):
    pass


class DivergenceError(FedSplitError):
    """Raised when NaN/Inf shows up in model parameters."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class ShapeError(FedSplitError, ValueError):
    pass


class ProtocolError(FedSplitError):
    """Violation of the federation message protocol."""


class PhaseError(FedSplitError):
    """Wraps a failure inside one phase of a federated run."""

    def __init__(self, phase, cause):
        self.phase = phase
        self.cause = cause
        super().__init__(f"phase {phase}: {cause}")


class UndefinedMetricError(FedSplitError, ValueError):
    pass
