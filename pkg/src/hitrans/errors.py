"""Exception types raised across the package."""


class HiTransError(Exception):
    """Base class for all package errors."""


class DimensionError(HiTransError, ValueError):
    pass


class ConfigError(HiTransError, ValueError):
    pass


class ContractError(HiTransError, RuntimeError):
    """A caller broke an operation's precondition."""


class EmptyPoolError(HiTransError, ValueError):
    pass


class LengthError(HiTransError, ValueError):
    pass


class CapacityError(HiTransError, ValueError):
    pass


class TrainingError(HiTransError, RuntimeError):
    pass


class ParseError(HiTransError, ValueError):
    pass


class SchemaError(HiTransError, ValueError):
    pass


class CompatibilityError(HiTransError, ValueError):
    pass


class UndefinedMetricError(HiTransError, ValueError):
    pass


class VocabIndexError(HiTransError, IndexError):
    pass
