"""Exception hierarchy shared across the package."""


class McapError(Exception):
    """Base class for all package errors."""


class DataValidationError(McapError):
    """Raised when a dataset or an input file violates an invariant.

    ``violations`` carries one human-readable message per problem so a
    single pass reports everything that is wrong.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DegenerateClusterError(McapError):
    """A cluster normalizer is numerically singular even after ridge repair."""


class EstimatorError(McapError):
    """Numeric failure inside the optimizer (non-finite gradient, failed start, ...)."""


class InferenceError(McapError):
    """Bootstrap or asymptotic inference could not be completed."""
