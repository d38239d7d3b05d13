"""Exception hierarchy shared by every calibra module."""


class CalibraError(Exception):
    pass


class FormatError(CalibraError):
    """Malformed NPY header or magic string."""


class UnsupportedLayout(CalibraError):
    """NPY payload stored in a layout we refuse to read (Fortran order, big-endian, ...)."""


class ValidationError(CalibraError, ValueError):
    pass


class DomainError(CalibraError, ValueError):
    pass


class NumericalError(CalibraError, ArithmeticError):
    pass


class StateError(CalibraError, RuntimeError):
    pass


class EmptyRegion(CalibraError, ValueError):
    pass


class IoError(CalibraError, OSError):
    pass
