"""Map quality metrics: absolute error profile, CDF, discrete Frechet distance, size."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Shape
from .trackmap import CompactTrackMap

__all__ = [
    "EvalReport",
    "resample_polyline",
    "polyline_length",
    "distance_to_polyline",
    "abs_error_profile",
    "discrete_frechet",
    "frechet_distance",
    "error_cdf",
    "cdf_at",
    "map_field_count",
    "evaluate",
]

REFERENCE_SPACING = 1.0  # m, maximum vertex spacing of reference and Frechet inputs
CDF_RESOLUTION = 0.1  # m


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def resample_polyline(points, spacing: float) -> np.ndarray:
    """Points every ``spacing`` meters of arc length, endpoint included."""
    pts = np.asarray(points, dtype=float)
    if not spacing > 0:
        raise ValueError(f"spacing must be > 0, got {spacing}")
    if len(pts) < 2:
        return pts.copy()
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    total = cum[-1]
    s = np.arange(0.0, total, spacing)
    if s.size == 0 or total - s[-1] > 1e-9 * max(1.0, total):
        s = np.append(s, total)
    return np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])


def _as_polyline(obj, spacing: float) -> np.ndarray:
    if isinstance(obj, CompactTrackMap):
        return obj.polyline(spacing)
    pts = np.asarray(obj, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ValueError("expected a non-empty (n, 2) polyline")
    return resample_polyline(pts, spacing)


def _reference_polyline(obj) -> np.ndarray:
    # distances are exact per segment, so a polyline reference is used as
    # given; resampling would move its vertices and make the result depend on
    # the direction of traversal
    if isinstance(obj, CompactTrackMap):
        return obj.polyline(REFERENCE_SPACING)
    pts = np.asarray(obj, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ValueError("expected a non-empty (n, 2) polyline")
    return pts


def _segment_distances(z: np.ndarray, a: np.ndarray, v: np.ndarray, vv: np.ndarray) -> np.ndarray:
    """Squared distances from points ``z`` (n, 2) to segments ``a + t v`` given per point, shape (n, k)."""
    dx = z[:, None, 0] - a[..., 0]
    dy = z[:, None, 1] - a[..., 1]
    t = np.clip((dx * v[..., 0] + dy * v[..., 1]) / vv, 0.0, 1.0)
    ex = dx - t * v[..., 0]
    ey = dy - t * v[..., 1]
    return ex * ex + ey * ey


def distance_to_polyline(points, polyline, k: int = 16, chunk: int = 256) -> np.ndarray:
    """Exact distance from each point to the nearest point of ``polyline``.

    Candidate segments are those touching the ``k`` nearest vertices. The
    candidate set is provably complete when the k-th vertex lies farther
    than ``d_nearest + max_segment / 2``; remaining points fall back to a
    scan over every segment.
    """
    z = np.atleast_2d(np.asarray(points, dtype=float))
    poly = np.asarray(polyline, dtype=float)
    if len(poly) == 1:
        return np.hypot(*(z - poly[0]).T)
    a = poly[:-1]
    v = poly[1:] - a
    vv = np.einsum("ij,ij->i", v, v)
    vv = np.where(vv > 0.0, vv, 1.0)
    n_seg = len(a)
    half = 0.5 * math.sqrt(float(np.max(vv)))

    k = min(k, len(poly))
    dist, idx = cKDTree(poly).query(z, k=k)
    dist = dist.reshape(len(z), k)
    idx = idx.reshape(len(z), k)
    seg = np.concatenate([np.clip(idx - 1, 0, n_seg - 1), np.clip(idx, 0, n_seg - 1)], axis=1)
    out = np.sqrt(np.min(_segment_distances(z, a[seg], v[seg], vv[seg]), axis=1))

    complete = (k == len(poly)) | (dist[:, -1] > dist[:, 0] + half)
    rest = np.flatnonzero(~complete)
    for lo in range(0, rest.size, chunk):
        sel = rest[lo : lo + chunk]
        out[sel] = np.sqrt(np.min(_segment_distances(z[sel], a[None], v[None], vv[None]), axis=1))
    return out


def abs_error_profile(candidate, reference, step: float = 1.0) -> np.ndarray:
    """Distance to ``reference`` every ``step`` meters along ``candidate``.

    Both arguments may be compact maps or ``(n, 2)`` polylines. A polyline
    reference is used as given since segment distances are exact. Returns an
    array of shape (n, 2) with columns ``s`` (candidate arc length) and
    ``|error|``.
    """
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    ref = _reference_polyline(reference)
    cand = _as_polyline(candidate, step)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(cand, axis=0).T))])
    return np.column_stack([s, distance_to_polyline(cand, ref)])


def discrete_frechet(P, Q) -> float:
    """Discrete Frechet distance between two vertex sequences.

    Standard coupling-lattice dynamic program, swept one anti-diagonal at a
    time so memory stays O(|P|).
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("polylines must not be empty")
    p, q = len(P), len(Q)
    px, py = P[:, 0].copy(), P[:, 1].copy()
    # Q reversed so that the cells of one anti-diagonal are a contiguous slice
    qx, qy = Q[::-1, 0].copy(), Q[::-1, 1].copy()
    # three rotating diagonals, stored with a one-slot offset so index i-1 = -1 reads inf
    prev2, prev1, cur = (np.full(p + 1, np.inf) for _ in range(3))
    prev1[1] = math.hypot(px[0] - Q[0, 0], py[0] - Q[0, 1])
    for k in range(1, p + q - 1):
        lo = k - q + 1 if k >= q else 0
        hi = k if k < p else p - 1
        j0 = q - 1 - k + lo
        n = hi - lo + 1
        d = np.hypot(px[lo : hi + 1] - qx[j0 : j0 + n], py[lo : hi + 1] - qy[j0 : j0 + n])
        best = np.minimum(prev1[lo : hi + 1], prev1[lo + 1 : hi + 2])
        np.minimum(best, prev2[lo : hi + 1], out=best)
        np.maximum(d, best, out=cur[lo + 1 : hi + 2])
        prev2, prev1, cur = prev1, cur, prev2
    return float(prev1[p])


def frechet_distance(candidate, reference, spacing: float = REFERENCE_SPACING) -> float:
    """Discrete Frechet distance after resampling both inputs every ``spacing`` meters."""
    return discrete_frechet(_as_polyline(candidate, spacing), _as_polyline(reference, spacing))


def _errors(profile) -> np.ndarray:
    arr = np.asarray(profile, dtype=float)
    return arr[:, 1] if arr.ndim == 2 else arr


def error_cdf(profile, resolution: float = CDF_RESOLUTION) -> np.ndarray:
    """Empirical CDF of ``|error|`` on a grid ``0, resolution, ...`` up to the maximum.

    ``profile`` is either an (n, 2) profile or a flat array of errors.
    """
    err = _errors(profile)
    if err.size == 0:
        raise ValueError("empty error profile")
    n_levels = int(math.ceil(np.max(err) / resolution - 1e-9)) + 1
    levels = np.round(np.arange(n_levels) * resolution, 10)
    srt = np.sort(err)
    frac = np.searchsorted(srt, levels + 1e-12, side="right") / err.size
    return np.column_stack([levels, frac])


def cdf_at(profile, level: float) -> float:
    err = _errors(profile)
    return float(np.mean(err <= level + 1e-12))


def map_field_count(obj) -> int:
    """Storage demand in data fields.

    Polyline: two fields per point. Compact map: three for the anchor pose,
    then per element a shape tag and a length, plus a radius unless the
    element is a straight.
    """
    if isinstance(obj, CompactTrackMap):
        return 3 + sum(2 if e.shape is Shape.STRAIGHT else 3 for e in obj.elements)
    return 2 * len(np.asarray(obj))


@dataclass
class EvalReport:
    mean_abs_error: float
    max_abs_error: float
    error_profile: np.ndarray
    cdf: np.ndarray
    frechet: float
    field_count: int

    def to_dict(self) -> dict:
        return {
            "mean_abs_error_m": self.mean_abs_error,
            "max_abs_error_m": self.max_abs_error,
            "frechet_m": self.frechet,
            "field_count": self.field_count,
            "cdf": [[float(a), float(b)] for a, b in self.cdf],
        }

    def profile_tsv(self) -> str:
        lines = ["s_m\tabs_err_m"]
        lines += [f"{s:.3f}\t{e:.6f}" for s, e in self.error_profile]
        return "\n".join(lines) + "\n"


def evaluate(candidate, reference, step: float = 1.0) -> EvalReport:
    """All quality metrics of ``candidate`` against ``reference``."""
    profile = abs_error_profile(candidate, reference, step)
    err = profile[:, 1]
    return EvalReport(
        mean_abs_error=float(np.mean(err)),
        max_abs_error=float(np.max(err)),
        error_profile=profile,
        cdf=error_cdf(err),
        frechet=frechet_distance(candidate, reference),
        field_count=map_field_count(candidate),
    )
