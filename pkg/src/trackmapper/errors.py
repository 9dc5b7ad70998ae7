"""Exception hierarchy shared by all trackmapper modules."""

from __future__ import annotations


class TrackMapError(Exception):
    """Base class for every error raised by this package."""


class GeometryDomainError(TrackMapError, ValueError):
    """An argument lies outside the domain of a geometric primitive."""


class DegenerateShapeError(TrackMapError, ValueError):
    """A transitional arc was requested with equal end curvatures."""


class DegenerateParameterError(TrackMapError, ValueError):
    """Optimization parameters do not describe a placeable track."""


class StructureError(TrackMapError, ValueError):
    """The element sequence violates the straight/transition/arc grammar."""


class UnsupportedTopologyError(StructureError):
    """Gap pattern that cannot be resolved (e.g. two consecutive unknowns)."""


class MapParseError(TrackMapError, ValueError):
    """A map, initial-element or measurement file is malformed."""


class AssignmentError(TrackMapError, KeyError):
    """A measurement refers to a track element that does not exist."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class EmissionRefusedError(TrackMapError):
    """Continuity gaps are too large to stitch an exact compact map."""

    def __init__(self, message: str, gaps: list | tuple = ()) -> None:
        super().__init__(message)
        self.gaps = tuple(gaps)


class JacobianError(TrackMapError):
    """Residual evaluation failed while probing a finite-difference column."""

    def __init__(self, index: int, cause: BaseException) -> None:
        super().__init__(f"residual evaluation failed at probe index {index}: {cause}")
        self.index = index
        self.cause = cause


class LMInitializationError(TrackMapError):
    """The residual is not finite at the starting point."""


class LMSolveError(TrackMapError):
    """The damped normal equations could not be solved."""

    def __init__(self, message: str, damping: float, nu: float) -> None:
        super().__init__(f"{message} (damping={damping:.3e}, nu={nu:g})")
        self.damping = damping
        self.nu = nu


class IncompleteInputError(TrackMapError, ValueError):
    """Filter output lacks a value required for reparameterization."""
