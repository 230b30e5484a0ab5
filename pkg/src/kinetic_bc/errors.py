"""Exception hierarchy shared by every module.

Numerical checks that *ran* but found a violated inequality are reported
through return values (``ok=False``); exceptions are reserved for inputs
that make a computation meaningless.
"""

from __future__ import annotations


class KineticError(Exception):
    """Base class for all package errors."""


# -- geometry ---------------------------------------------------------------
class ZeroGradient(KineticError):
    pass


class NotOnBoundary(KineticError):
    pass


class ProjectionFailed(KineticError):
    pass


# -- trajectories -----------------------------------------------------------
class ZeroVelocity(KineticError, ValueError):
    pass


class NoExit(KineticError):
    """The backward ray never left the bounding bracket (geometry bug)."""


class GrazingExit(KineticError):
    pass


class SegmentLeavesDomain(KineticError, ValueError):
    pass


# -- cycles -----------------------------------------------------------------
class GrazingAbort(KineticError):
    pass


class IllConditioned(KineticError):
    pass


# -- collision --------------------------------------------------------------
class QuadratureUnderResolved(KineticError):
    pass


class DiagonalSingularity(KineticError, ValueError):
    pass


class InvalidParameters(KineticError, ValueError):
    pass


# -- semigroup --------------------------------------------------------------
class RemainderTooLarge(KineticError):
    pass


class NonConvergence(KineticError):
    pass


class NonContraction(KineticError):
    pass


class NonPositiveNorms(KineticError, ValueError):
    pass


class SingularGram(KineticError):
    pass


# -- cli --------------------------------------------------------------------
class ConfigInvalid(KineticError, ValueError):
    pass


class CheckFailed(KineticError):
    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
