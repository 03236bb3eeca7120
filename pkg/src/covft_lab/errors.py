"""Exception types shared across the lab."""


class LabError(Exception):
    pass


class DimensionError(LabError, ValueError):
    pass


class ContractError(LabError):
    pass


class NumericError(LabError, ArithmeticError):
    pass


class ConfigError(LabError, ValueError):
    pass


class InputError(LabError, ValueError):
    pass


class DegenerateInputError(InputError):
    pass


class ArtifactError(LabError):
    """A run directory lacks a file some command needs."""
