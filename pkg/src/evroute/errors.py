"""Exception types shared across the package."""


class EvRouteError(Exception):
    """Base class for all package errors."""


class InvalidArgument(EvRouteError, ValueError):
    pass


class ParseError(EvRouteError, ValueError):
    """Malformed input file. ``line`` and ``field`` locate the problem when known."""

    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.field = field


class InvariantViolation(EvRouteError, ValueError):
    pass


class UnknownNode(EvRouteError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NoNeighbors(EvRouteError):
    pass


class Depleted(EvRouteError):
    """Battery would go below zero. ``deficit`` is the missing SoC in percent."""

    def __init__(self, deficit):
        super().__init__(f"battery depleted, short by {deficit:.4f}% SoC")
        self.deficit = deficit


class InsufficientData(EvRouteError, ValueError):
    pass


class NonMonotoneFit(EvRouteError, ValueError):
    pass


class NoGoalAtDistance(EvRouteError):
    pass


class EpisodeDone(EvRouteError):
    pass


class InvalidActionSlot(EvRouteError, IndexError):
    pass


class UnknownStage(EvRouteError, ValueError):
    pass


class NonFiniteLoss(EvRouteError, FloatingPointError):
    pass


class MissingPowerChannel(EvRouteError, ValueError):
    pass


class InsufficientExcitation(EvRouteError, ValueError):
    pass


class NoFeasiblePath(EvRouteError):
    pass


class SnapFailure(EvRouteError):
    pass
