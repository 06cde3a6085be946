"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class SwinNowError(Exception):
    exit_code = 1


class ConfigError(SwinNowError, ValueError):
    exit_code = 2


class DimensionError(SwinNowError, ValueError):
    exit_code = 2


class ContractError(SwinNowError, RuntimeError):
    exit_code = 2


class FormatError(SwinNowError, ValueError):
    exit_code = 3


class NumericError(SwinNowError, ArithmeticError):
    exit_code = 4
