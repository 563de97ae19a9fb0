"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class FormatError(ContractError):
    """A file on disk does not follow the expected binary layout."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""
