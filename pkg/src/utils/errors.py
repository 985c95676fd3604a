"""Exception hierarchy shared by every stage.

Each error carries the process exit code the CLI reports for it:
1 usage/configuration, 2 data or format, 3 numerical.
"""


class BeamsepError(Exception):
    exit_code = 2


class ConfigurationError(BeamsepError, ValueError):
    exit_code = 1


# Data / format family (exit code 2)

class DataError(BeamsepError, ValueError):
    exit_code = 2


class AudioFormatError(DataError):
    pass


class LengthError(DataError):
    pass


class GeometryError(DataError):
    pass


class ShapeError(DataError):
    pass


class EnergyError(DataError):
    pass


class InputError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class SamplingError(DataError):
    pass


class CompatibilityError(DataError):
    pass


# Numerical family (exit code 3)

class NumericalError(BeamsepError, ArithmeticError):
    exit_code = 3


class DesignError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class DegenerateWeightError(NumericalError):
    pass
