"""Exception hierarchy shared by all modules."""


class LSSMError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(LSSMError, ValueError):
    """A physical or numerical parameter is outside its admissible range."""


class DataCorruptionError(LSSMError, FloatingPointError):
    """Non-finite values appeared in an input or in the evolving state."""


class GridMismatchError(LSSMError, ValueError):
    """Two fields living on different grids were combined."""


class FormatError(LSSMError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ConfigError(LSSMError, ValueError):
    """Run configuration failed validation; ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class WindowError(LSSMError, ValueError):
    """Step records handed to an audit are not contiguous in time."""


class InsufficientSampleError(LSSMError, ValueError):
    pass


class AssumptionViolationError(LSSMError, ValueError):
    """The noise strength breaks the hypothesis rho_inf < nu * lambda1."""


class UndefinedStatisticsError(LSSMError, ValueError):
    pass


class MergeError(LSSMError, ValueError):
    pass


class EnsembleFailure(LSSMError, RuntimeError):
    """Fewer than half of the trajectories of an ensemble survived."""
