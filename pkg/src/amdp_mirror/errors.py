"""Exception hierarchy.

Each family maps to one CLI exit code (see ``amdp_mirror.cli``).
"""


class AmdpError(Exception):
    """Base class for all library errors."""


class DimensionError(AmdpError, ValueError):
    pass


class ParameterError(AmdpError, ValueError):
    pass


class ErgodicityError(AmdpError):
    pass


class NumericalError(AmdpError):
    pass


class InstabilityError(NumericalError):
    pass


class ConfigurationError(AmdpError, ValueError):
    pass


class OracleError(AmdpError):
    """Two independent reference computations disagree."""


class CapacityError(AmdpError):
    pass


class DataError(AmdpError):
    pass


class InvariantViolation(AmdpError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index

    def __reduce__(self):
        return (type(self), (str(self), self.index))


class RunError(AmdpError):
    """A solver loop failed; ``iteration`` records where."""

    def __init__(self, message, iteration=None, seed=None):
        super().__init__(message)
        self.iteration = iteration
        self.seed = seed

    def __reduce__(self):
        return (type(self), (str(self), self.iteration, self.seed))
