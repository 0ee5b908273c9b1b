"""Exception hierarchy shared across the package."""


class STGCRNNError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(STGCRNNError, ValueError):
    pass


class ContractError(STGCRNNError, ValueError):
    """A precondition of an operation was violated."""


class DeterminismError(STGCRNNError):
    pass


class DegenerateGraphError(STGCRNNError, ValueError):
    pass


class IsolatedNodeError(STGCRNNError, ValueError):
    def __init__(self, node, message=None):
        self.node = node
        super().__init__(message or f"node {node!r} is isolated after thresholding")


class DivisionDomainError(STGCRNNError, ZeroDivisionError):
    pass


class EstimationError(STGCRNNError, ArithmeticError):
    """Power iteration failed to converge; ``last_estimate`` holds the final iterate."""

    def __init__(self, message, last_estimate, last_vector=None):
        super().__init__(message)
        self.last_estimate = last_estimate
        self.last_vector = last_vector


class ConfigurationError(STGCRNNError, ValueError):
    pass


class AlignmentError(STGCRNNError, ValueError):
    pass


class BoundsError(STGCRNNError, ValueError):
    pass


class PoisonedStateError(STGCRNNError, FloatingPointError):
    pass


class UndefinedMetricError(STGCRNNError, ValueError):
    pass


class TrainingAborted(STGCRNNError, RuntimeError):
    pass
