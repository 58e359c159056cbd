"""Exception hierarchy. Each family maps to a CLI exit code."""


class AffburstError(Exception):
    exit_code = 1


class ConfigError(AffburstError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """A numeric parameter is outside its admissible range."""


class DataError(AffburstError, ValueError):
    exit_code = 3


class InputError(DataError):
    pass


class DimensionError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class NumericError(AffburstError, ArithmeticError):
    exit_code = 4


class CalibrationError(NumericError):
    pass


class WeightError(NumericError):
    """Class weights cannot be formed, e.g. a class is absent."""
