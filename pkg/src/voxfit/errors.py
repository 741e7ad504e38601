"""Exception hierarchy. Each family maps to one CLI exit code."""


class VoxfitError(Exception):
    exit_code = 1


class ConfigError(VoxfitError, ValueError):
    exit_code = 2


class ContractError(ConfigError):
    """API misuse, e.g. calling backward on a non-scalar node."""


class DataError(VoxfitError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class StatError(DataError):
    pass


class NumericalError(VoxfitError, ArithmeticError):
    exit_code = 4


class DomainError(NumericalError):
    pass


class ModelError(NumericalError):
    """Forward model produced non-finite output."""
