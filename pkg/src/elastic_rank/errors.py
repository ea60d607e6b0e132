"""Exception hierarchy."""


class ElasticRankError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ElasticRankError, ValueError):
    pass


class ContractError(ElasticRankError, RuntimeError):
    """An operation was called outside its precondition."""


class FloorViolationError(ElasticRankError, RuntimeError):
    """Pruning would leave a matrix with no active rank."""


class CapacityError(ElasticRankError, RuntimeError):
    """Expansion requested but every rank slot is already active."""


class ConfigError(ElasticRankError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class TrainingAbort(ElasticRankError, RuntimeError):
    """Training hit a non-finite loss; ``diagnostic`` holds step and layer norms."""

    def __init__(self, message, diagnostic):
        super().__init__(message)
        self.diagnostic = diagnostic
