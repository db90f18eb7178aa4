"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ULSADError(Exception):
    exit_code = 1


class ConfigError(ULSADError):
    exit_code = 1


class ShapeError(ULSADError, ValueError):
    exit_code = 1


class DataError(ULSADError):
    exit_code = 2


class CalibrationError(ULSADError):
    exit_code = 2


class PersistenceError(ULSADError):
    exit_code = 2


class MetricError(ULSADError, ValueError):
    exit_code = 2


class NumericError(ULSADError):
    exit_code = 3
