"""Exception hierarchy shared by every module."""


class PrecorError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PrecorError, ValueError):
    pass


class SingularFactorError(PrecorError, ArithmeticError):
    pass


class FactorizationError(PrecorError, ArithmeticError):
    """Incomplete factorization broke down even after the largest diagonal shift."""

    def __init__(self, message: str, shift: float):
        super().__init__(message)
        self.shift = shift


class NumericFailure(PrecorError, ArithmeticError):
    """A NaN/Inf appeared in an intermediate quantity; ``stage`` names where."""

    def __init__(self, stage: str, message: str = ""):
        super().__init__(f"non-finite values at stage '{stage}'" + (f": {message}" if message else ""))
        self.stage = stage


class BreakdownError(PrecorError, ArithmeticError):
    """CG detected a non-positive curvature p^T A p."""


class ConfigError(PrecorError, ValueError):
    pass
