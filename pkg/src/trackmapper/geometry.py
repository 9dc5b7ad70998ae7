"""Planar track primitives: straights, transitional arcs (clothoids), circular arcs.

Headings ``phi`` are measured counterclockwise from the xi axis. A signed
radius ``r`` follows the railway convention (+ right, - left) and the stored
curvature is ``kappa = 1/r``, so the heading evolves as ``dphi/ds = -kappa(s)``.
With this choice a negative radius bends the track to the left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateShapeError, GeometryDomainError

__all__ = [
    "Shape",
    "Pose",
    "TrackElement",
    "FootPoint",
    "ElementCurve",
    "wrap_angle",
    "clothoid_points",
    "element_pose",
    "sample_element",
    "foot_point",
]

_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)
MAX_QUADRATURE_SEGMENT = 10.0  # m, composite Gauss-Legendre panel length
DEFAULT_SCAN_STEP = 5.0  # m, foot-point bracketing grid
_S_TOL = 1e-9  # slack accepted on s in [0, L] checks


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to the half-open interval (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


class Shape(str, Enum):
    STRAIGHT = "st"
    TRANSITION = "ta"
    CIRCULAR = "ca"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Pose:
    """Planar position ``(xi, eta)`` in meters and heading ``phi`` in radians."""

    xi: float
    eta: float
    phi: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "xi", float(self.xi))
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "phi", wrap_angle(float(self.phi)))

    @classmethod
    def from_degrees(cls, xi: float, eta: float, phi_deg: float) -> Pose:
        return cls(xi, eta, math.radians(phi_deg))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.xi, self.eta])

    @property
    def phi_deg(self) -> float:
        return math.degrees(self.phi)

    @property
    def tangent(self) -> np.ndarray:
        return np.array([math.cos(self.phi), math.sin(self.phi)])


@dataclass(frozen=True)
class TrackElement:
    """One geometric primitive with its intrinsic parameters.

    Use the ``straight``, ``circular`` and ``transition`` constructors rather
    than passing curvatures by hand.
    """

    id: int
    shape: Shape
    length: float
    kappa_start: float = 0.0
    kappa_end: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", Shape(self.shape))
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "kappa_start", float(self.kappa_start))
        object.__setattr__(self, "kappa_end", float(self.kappa_end))
        if not (math.isfinite(self.length) and self.length > 0.0):
            raise GeometryDomainError(f"element {self.id}: length must be > 0, got {self.length}")
        k0, k1 = self.kappa_start, self.kappa_end
        if not (math.isfinite(k0) and math.isfinite(k1)):
            raise GeometryDomainError(f"element {self.id}: curvature must be finite")
        if self.shape is Shape.STRAIGHT:
            if k0 != 0.0 or k1 != 0.0:
                raise GeometryDomainError(f"element {self.id}: a straight has zero curvature")
        elif self.shape is Shape.CIRCULAR:
            if k0 == 0.0 or k0 != k1:
                raise GeometryDomainError(
                    f"element {self.id}: a circular arc needs equal nonzero curvature"
                )
        else:
            if k0 == k1:
                raise DegenerateShapeError(
                    f"element {self.id}: transitional arc with kappa_start == kappa_end; "
                    "model it as a straight or circular arc"
                )
            if k0 != 0.0 and k1 != 0.0:
                raise GeometryDomainError(
                    f"element {self.id}: a transitional arc must start or end with zero curvature"
                )

    @classmethod
    def straight(cls, id: int, length: float) -> TrackElement:
        return cls(id, Shape.STRAIGHT, length)

    @classmethod
    def circular(cls, id: int, length: float, radius: float) -> TrackElement:
        if radius == 0.0 or not math.isfinite(radius):
            raise GeometryDomainError(f"element {id}: circular arc radius must be finite and nonzero")
        kappa = 1.0 / radius
        return cls(id, Shape.CIRCULAR, length, kappa, kappa)

    @classmethod
    def transition(cls, id: int, length: float, kappa_start: float, kappa_end: float) -> TrackElement:
        return cls(id, Shape.TRANSITION, length, kappa_start, kappa_end)

    @property
    def radius(self) -> float:
        """Signed radius; ``inf`` for straights, the arc-side radius for transitions."""
        kappa = self.kappa_start if self.kappa_start != 0.0 else self.kappa_end
        return math.inf if kappa == 0.0 else 1.0 / kappa

    @property
    def curvature_rate(self) -> float:
        return (self.kappa_end - self.kappa_start) / self.length


@dataclass(frozen=True)
class FootPoint:
    """Perpendicular projection of a point onto an element."""

    s: float
    point: np.ndarray
    on_boundary: bool


class _ClothoidTable:
    """Positions of a linear-curvature curve via composite Gauss-Legendre.

    Works for any pair of end curvatures, including the constant-curvature
    cases, which lets tests compare against the closed forms.
    """

    def __init__(self, start: Pose, kappa_start: float, kappa_end: float, length: float) -> None:
        self.start = start
        self.k0 = kappa_start
        self.rate = (kappa_end - kappa_start) / length
        self.length = length
        n_seg = max(1, math.ceil(length / MAX_QUADRATURE_SEGMENT))
        self.h = length / n_seg
        self.n_seg = n_seg
        left = np.arange(n_seg) * self.h
        nodes = left[:, None] + 0.5 * self.h * (_GL_X[None, :] + 1.0)
        phi = self.headings(nodes)
        w = 0.5 * self.h * _GL_W
        dx = np.cos(phi) @ w
        dy = np.sin(phi) @ w
        knots = np.zeros((n_seg + 1, 2))
        knots[1:, 0] = np.cumsum(dx)
        knots[1:, 1] = np.cumsum(dy)
        self.knots = knots + start.position

    def headings(self, s):
        s = np.asarray(s, dtype=float)
        return self.start.phi - (self.k0 * s + 0.5 * self.rate * s * s)

    def curvatures(self, s):
        return self.k0 + self.rate * np.asarray(s, dtype=float)

    def positions(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = np.clip(np.floor(s / self.h).astype(int), 0, self.n_seg - 1)
        a = k * self.h
        half = 0.5 * (s - a)
        nodes = a[:, None] + half[:, None] * (_GL_X[None, :] + 1.0)
        phi = self.headings(nodes)
        dx = half * (np.cos(phi) @ _GL_W)
        dy = half * (np.sin(phi) @ _GL_W)
        return self.knots[k] + np.column_stack([dx, dy])


def clothoid_points(start: Pose, kappa_start: float, kappa_end: float, length: float, s):
    """Positions and headings along a linear-curvature curve.

    Unlike :func:`element_pose` this accepts equal end curvatures, so it also
    covers straights and circular arcs.

    Returns
    -------
    xy : ndarray, shape (n, 2)
    phi : ndarray, shape (n,)
        Unwrapped headings.
    """
    table = _ClothoidTable(start, kappa_start, kappa_end, length)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return table.positions(s), table.headings(s)


class ElementCurve:
    """An element placed at a start pose, with vectorized evaluation.

    Parameters
    ----------
    element : TrackElement
    start : Pose
        Pose at ``s = 0``.
    """

    def __init__(self, element: TrackElement, start: Pose) -> None:
        self.element = element
        self.start = start
        self.length = element.length
        self._p0 = start.position
        self._t0 = start.tangent
        shape = element.shape
        if shape is Shape.TRANSITION:
            self._table = _ClothoidTable(start, element.kappa_start, element.kappa_end, element.length)
        elif shape is Shape.CIRCULAR:
            self._omega = -element.kappa_start
            self._radius = 1.0 / abs(self._omega)
            normal = np.array([-self._t0[1], self._t0[0]])
            self._center = self._p0 + normal / self._omega
            d = self._p0 - self._center
            self._theta0 = math.atan2(d[1], d[0])
        self.end = self.pose(self.length)

    # -- evaluation -------------------------------------------------------
    def positions(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        shape = self.element.shape
        if shape is Shape.STRAIGHT:
            return self._p0 + s[:, None] * self._t0
        if shape is Shape.CIRCULAR:
            theta = self._theta0 + self._omega * s
            return self._center + self._radius * np.column_stack([np.cos(theta), np.sin(theta)])
        return self._table.positions(s)

    def headings(self, s) -> np.ndarray:
        """Unwrapped headings at ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        shape = self.element.shape
        if shape is Shape.STRAIGHT:
            return np.full(s.shape, self.start.phi)
        if shape is Shape.CIRCULAR:
            return self.start.phi + self._omega * s
        return self._table.headings(s)

    def curvatures(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        e = self.element
        return e.kappa_start + e.curvature_rate * s

    def pose(self, s: float) -> Pose:
        if not (-_S_TOL <= s <= self.length + _S_TOL):
            raise GeometryDomainError(
                f"s={s} outside [0, {self.length}] on element {self.element.id}"
            )
        s = min(max(s, 0.0), self.length)
        xy = self.positions(s)[0]
        return Pose(xy[0], xy[1], float(self.headings(s)[0]))

    # -- projection -------------------------------------------------------
    def project(self, points, scan_step: float = DEFAULT_SCAN_STEP, tol: float = 1e-6, max_iter: int = 50):
        """Foot points of ``points`` (shape (n, 2)) on this element.

        Returns
        -------
        s : ndarray (n,)
        foot : ndarray (n, 2)
        on_boundary : ndarray of bool (n,)
        """
        z = np.atleast_2d(np.asarray(points, dtype=float))
        shape = self.element.shape
        if shape is Shape.STRAIGHT:
            s = np.clip((z - self._p0) @ self._t0, 0.0, self.length)
        elif shape is Shape.CIRCULAR:
            s = self._project_circular(z)
        else:
            s = self._project_clothoid(z, scan_step, tol, max_iter)
        foot = self.positions(s)
        on_boundary = (s <= 0.0) | (s >= self.length)
        return s, foot, on_boundary

    def _closest_endpoint(self, z: np.ndarray) -> np.ndarray:
        ends = self.positions([0.0, self.length])
        d0 = np.sum((z - ends[0]) ** 2, axis=1)
        d1 = np.sum((z - ends[1]) ** 2, axis=1)
        return np.where(d1 < d0, self.length, 0.0)

    def _project_circular(self, z: np.ndarray) -> np.ndarray:
        d = z - self._center
        theta = np.arctan2(d[:, 1], d[:, 0])
        sweep = np.mod((theta - self._theta0) * np.sign(self._omega), 2.0 * np.pi)
        s = sweep * self._radius
        outside = s > self.length
        if np.any(outside):
            s = np.where(outside, self._closest_endpoint(z), s)
        return s

    def _project_clothoid(self, z, scan_step, tol, max_iter) -> np.ndarray:
        L = self.length
        grid = np.arange(0.0, L, scan_step)
        grid = np.append(grid, L)
        gp = self.positions(grid)
        d2 = np.sum((z[:, None, :] - gp[None, :, :]) ** 2, axis=2)
        k = np.argmin(d2, axis=1)
        s = grid[k].copy()
        lo = grid[np.maximum(k - 1, 0)]
        hi = grid[np.minimum(k + 1, grid.size - 1)]
        active = np.ones(z.shape[0], dtype=bool)
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            sa = s[idx]
            p = self.positions(sa)
            phi = self._table.headings(sa)
            t = np.column_stack([np.cos(phi), np.sin(phi)])
            n = np.column_stack([-t[:, 1], t[:, 0]])
            r = p - z[idx]
            g = np.sum(r * t, axis=1)
            dg = 1.0 - np.sum(r * n, axis=1) * self._table.curvatures(sa)
            lo[idx] = np.where(g < 0.0, sa, lo[idx])
            hi[idx] = np.where(g > 0.0, sa, hi[idx])
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = sa - g / dg
            bad = ~np.isfinite(newton) | (dg <= 0.0) | (newton < lo[idx]) | (newton > hi[idx])
            s_new = np.where(bad, 0.5 * (lo[idx] + hi[idx]), newton)
            step = np.abs(s_new - sa)
            s[idx] = s_new
            active[idx] = step >= tol
        # the bracket is local; keep the endpoints as competitors
        cand = np.column_stack([s, np.zeros_like(s), np.full_like(s, L), grid[k]])
        pts = self.positions(cand.ravel()).reshape(cand.shape + (2,))
        dist = np.sum((pts - z[:, None, :]) ** 2, axis=2)
        return cand[np.arange(cand.shape[0]), np.argmin(dist, axis=1)]


def element_pose(element: TrackElement, start: Pose, s: float) -> Pose:
    """Pose at arc length ``s`` along ``element`` placed at ``start``."""
    if not (0.0 <= s <= element.length):
        raise GeometryDomainError(f"s={s} outside [0, {element.length}]")
    return ElementCurve(element, start).pose(s)


def sample_element(element: TrackElement, start: Pose, spacing: float) -> list[tuple[float, Pose]]:
    """Poses every ``spacing`` meters, always ending with ``s = L``."""
    if not spacing > 0.0:
        raise GeometryDomainError(f"spacing must be > 0, got {spacing}")
    curve = ElementCurve(element, start)
    s = np.arange(0.0, element.length, spacing)
    if s.size == 0 or element.length - s[-1] > 1e-9 * max(1.0, element.length):
        s = np.append(s, element.length)
    else:
        s[-1] = element.length
    xy = curve.positions(s)
    phi = curve.headings(s)
    return [(float(si), Pose(p[0], p[1], h)) for si, p, h in zip(s, xy, phi)]


def foot_point(element: TrackElement, start: Pose, z, scan_step: float = DEFAULT_SCAN_STEP) -> FootPoint:
    """Closest point on ``element`` to the planar point ``z``."""
    s, foot, edge = ElementCurve(element, start).project(np.asarray(z, dtype=float)[None, :], scan_step)
    return FootPoint(float(s[0]), foot[0], bool(edge[0]))
