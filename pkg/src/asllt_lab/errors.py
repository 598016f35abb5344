"""Exception types raised across the package."""


class AslltError(Exception):
    """Base class; ``exit_code`` is used by the command line front end."""

    exit_code = 2


class IncompatibleLattice(AslltError):
    pass


class MassBudgetExceeded(AslltError):
    exit_code = 3


class DegenerateVariance(AslltError):
    pass


class ThetaOutOfRange(AslltError):
    pass


class DegenerateTheta(AslltError):
    pass


class InvalidModulus(AslltError):
    pass


class InvalidArgument(AslltError, ValueError):
    pass


class IndexOrder(AslltError, ValueError):
    pass


class TooLarge(AslltError):
    exit_code = 3


class HypothesisViolated(AslltError):
    exit_code = 4


class RangeExceeded(AslltError):
    exit_code = 3


class DivergenceViolated(AslltError):
    exit_code = 4


class InvalidBlock(AslltError, ValueError):
    pass


class InvalidExponent(AslltError, ValueError):
    pass


class NotIID(AslltError):
    pass


class NotSimulable(AslltError):
    pass
