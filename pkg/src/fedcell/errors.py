"""Exception types shared across the package.

Each carries an ``exit_code`` so the CLI can map failures to a category.
"""


class FedcellError(Exception):
    exit_code = 1


class ConfigError(FedcellError, ValueError):
    exit_code = 2


class DataFormatError(FedcellError, ValueError):
    exit_code = 3


class NumericalError(FedcellError, ArithmeticError):
    exit_code = 4


class ConvergenceError(NumericalError):
    pass
