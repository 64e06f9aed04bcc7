"""Exception types raised across the package.

Every error carries a stable ``code`` used by the command line front end to
pick an exit status.
"""


class HiFiError(Exception):
    code = 3


class ConfigError(HiFiError, ValueError):
    code = 2


class FormatError(HiFiError, ValueError):
    code = 4


class NumericalError(HiFiError, ArithmeticError):
    code = 3


class NotPositiveDefinite(NumericalError):
    pass


class DegenerateInput(NumericalError):
    pass


class ShapeMismatch(HiFiError, ValueError):
    code = 2


class NonFiniteActivation(NumericalError):
    pass


class Divergence(NumericalError):
    pass


class TapMismatch(HiFiError, ValueError):
    code = 2


class EmptyAccumulator(HiFiError, ValueError):
    code = 2


class BudgetExceeded(HiFiError, RuntimeError):
    code = 2


class UnknownClass(ConfigError):
    pass


class DegenerateLayer(NumericalError):
    pass


class WrongClassData(ConfigError):
    pass


class InconsistentCoupling(HiFiError, ValueError):
    code = 2


class MissingRadius(ConfigError):
    pass


class ZeroRadius(NumericalError):
    pass
