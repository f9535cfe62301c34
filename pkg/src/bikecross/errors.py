"""Exception hierarchy shared by every bikecross module."""


class BikecrossError(Exception):
    """Base class for all library errors."""


class PreconditionError(BikecrossError, ValueError):
    """An argument violates a documented precondition."""


# dynamics
class RollSingularity(BikecrossError):
    pass


class LowSpeed(BikecrossError):
    pass


class BalanceLost(BikecrossError):
    pass


# eic control
class SingularKpsi(BikecrossError):
    pass


class NoRoot(BikecrossError):
    pass


class HSingular(BikecrossError):
    pass


# leg
class JointLimit(BikecrossError):
    pass


class Unreachable(BikecrossError):
    pass


class SingularPose(BikecrossError):
    pass


class TorqueLimit(BikecrossError):
    pass


# impact
class BadHeight(BikecrossError):
    pass


class SingularSystem(BikecrossError):
    pass


# residual
class IncompleteWindow(BikecrossError):
    pass


class TrainingDiverged(BikecrossError):
    pass


class ModelFormatError(BikecrossError):
    pass


# impulse control
class Infeasible(BikecrossError):
    pass


class ForceLimit(BikecrossError):
    pass


class ZeroRate(BikecrossError):
    pass


# supervisor
class IllegalTransition(BikecrossError):
    pass


# harness
class ParseError(BikecrossError):
    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class ValidationError(BikecrossError):
    pass
