"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LabError(Exception):
    exit_code = 1


class UsageError(LabError):
    exit_code = 2


class ConfigError(LabError, ValueError):
    exit_code = 2


class DimensionError(LabError, ValueError):
    exit_code = 3


class DataError(LabError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    pass


class IncompatibleRunsError(DataError):
    pass


class LabIOError(LabError, OSError):
    exit_code = 4


class IntegrityError(LabIOError):
    pass


class NumericalError(LabError, ArithmeticError):
    exit_code = 5
