"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TileflowError(Exception):
    exit_code = 2


class ValidationError(TileflowError, ValueError):
    exit_code = 2


class InvalidSpecError(ValidationError):
    """Planted artifact regions or slide dimensions are unusable."""


class PrivacyError(TileflowError):
    exit_code = 3


class AlreadyStrippedError(PrivacyError):
    pass


class IncompleteAggregationError(ValidationError):
    """Detector outputs do not cover every encoded tile exactly once."""

    def __init__(self, message, missing_shards=(), duplicates=()):
        super().__init__(message)
        self.missing_shards = tuple(missing_shards)
        self.duplicates = tuple(duplicates)


class SchedulingError(TileflowError):
    exit_code = 4


class BudgetExceededError(SchedulingError):
    pass


class SimulationStalledError(TileflowError):
    exit_code = 5

    def __init__(self, message, unprocessed=()):
        super().__init__(message)
        self.unprocessed = tuple(unprocessed)
