"""Exception hierarchy shared across the package."""


class LoopmagError(Exception):
    """Base class for all package errors."""


class DegreeOverflow(LoopmagError):
    pass


class EvaluationAtPole(LoopmagError, ZeroDivisionError):
    pass


class UnstablePlant(LoopmagError):
    pass


class ZeroOnImaginaryAxis(LoopmagError):
    pass


class ImproperQ(LoopmagError):
    pass


class UnstableClosedLoop(LoopmagError):
    pass


class NoCrossover(LoopmagError):
    pass


class UnstableDiscretization(LoopmagError, AssertionError):
    pass


class NumericalDivergence(LoopmagError):
    """Closed-loop run left the physical state bounds.

    ``record`` holds the samples produced before the divergence was detected.
    """

    def __init__(self, message, record=None, index=None):
        super().__init__(message)
        self.record = record
        self.index = index


class WindowTooLong(LoopmagError):
    pass


class GridMismatch(LoopmagError, ValueError):
    pass


class NonlinearRegime(LoopmagError):
    pass


class DegenerateDrive(LoopmagError, ValueError):
    pass


class IllConditioned(LoopmagError):
    pass


class ConfigError(LoopmagError, ValueError):
    pass
