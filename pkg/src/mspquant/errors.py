"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class MSPError(Exception):
    exit_code = 1


class ValidationError(MSPError, ValueError):
    exit_code = 2


class NumericError(MSPError, ArithmeticError):
    exit_code = 3


class FormatError(MSPError, IOError):
    exit_code = 4


# container / dataset formats
class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


# quantizer domain
class InvalidSchemeError(ValidationError):
    pass


class UnknownLevelError(ValidationError):
    pass


class InvalidCodeError(ValidationError):
    pass


class InvalidRatioError(ValidationError):
    pass


class LayerKindError(ValidationError):
    pass


class IncompatibleShapeError(ValidationError):
    pass


class DivergenceError(NumericError):
    pass


class OverflowRiskError(NumericError):
    pass


class InfeasiblePlanError(ValidationError):
    pass


class UnfinalizedModelError(ValidationError):
    pass


class EmptyDatasetError(ValidationError):
    pass
