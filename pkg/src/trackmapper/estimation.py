"""Measurement residuals, finite-difference Jacobian and Levenberg-Marquardt.

The cost minimized is

    F(x) = sum_t sum_i e_ti^T Omega_ti e_ti  +  c * sum_k (gap_k / sigma_k)^2

where ``e_ti = z_ti - foot(z_ti)`` is the offset of a GNSS fix from its
perpendicular foot point on the assigned element, and the second sum holds
the soft continuity terms between each arc group and the following straight.
The weight ``c`` is the mean information of the fixes relative to the default
``I / DEFAULT_SIGMA**2``, which is 1 for default-weighted data.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.linalg

from .errors import (
    AssignmentError,
    DegenerateParameterError,
    GeometryDomainError,
    JacobianError,
    LMInitializationError,
    LMSolveError,
    MapParseError,
    StructureError,
)
from .geometry import DEFAULT_SCAN_STEP
from .geometry import Shape
from .trackmap import (
    CompactTrackMap,
    OptParamSet,
    atomic_write_text,
    build_chain,
    emit_compact,
    naive_concatenation,
    reparameterize,
)

__all__ = [
    "DEFAULT_SIGMA",
    "Measurement",
    "AssignmentSet",
    "ResidualSystem",
    "LMConfig",
    "LMIteration",
    "LMReport",
    "default_omega",
    "measurement_residual",
    "total_error",
    "continuity_residuals",
    "jacobian_fd",
    "levenberg_marquardt",
    "assign_nearest",
    "fit_terminal_extents",
    "OptimizationResult",
    "optimize_map",
    "measurements_to_csv",
    "measurements_from_csv",
    "save_measurements",
    "load_measurements",
]

DEFAULT_SIGMA = 10.0  # m, assumed receiver uncertainty when none is given
SIGMA_POS = 0.01  # m
SIGMA_HEAD = 0.001  # rad

# failures that make a trial point unusable rather than the whole run
_TRIAL_ERRORS = (DegenerateParameterError, GeometryDomainError, StructureError, FloatingPointError)


def default_omega(sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    return np.eye(2) / sigma**2


@dataclass(frozen=True, eq=False)
class Measurement:
    """A GNSS fix assigned to one track element.

    ``s_true`` is the ground-truth arc length on that element; it is only
    known for simulated data.
    """

    track_id: int
    z: np.ndarray
    omega: np.ndarray = field(default_factory=default_omega)
    s_true: float | None = None

    def __post_init__(self) -> None:
        z = np.array(self.z, dtype=float).reshape(2)
        om = np.array(self.omega, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(z)):
            raise ValueError(f"measurement position must be finite, got {z}")
        if abs(om[0, 1] - om[1, 0]) > 1e-12 * max(1.0, np.abs(om).max()):
            raise ValueError("information matrix must be symmetric")
        if not np.all(np.linalg.eigvalsh(om) > 0.0):
            raise ValueError("information matrix must be positive definite")
        z.flags.writeable = False
        om.flags.writeable = False
        object.__setattr__(self, "track_id", int(self.track_id))
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "omega", om)


class AssignmentSet:
    """Measurements grouped by track id.

    ``measurements`` keeps the input order. ``by_track`` holds each group in
    a canonical order (sorted by position) so that residual vectors do not
    depend on how the input was shuffled.
    """

    def __init__(self, measurements: Iterable[Measurement]) -> None:
        self.measurements = tuple(measurements)
        groups: dict[int, list[Measurement]] = {}
        for m in self.measurements:
            groups.setdefault(m.track_id, []).append(m)
        self.by_track = {
            t: tuple(sorted(ms, key=lambda m: (m.z[0], m.z[1], m.omega[0, 0], m.omega[0, 1], m.omega[1, 1])))
            for t, ms in sorted(groups.items())
        }

    def __len__(self) -> int:
        return len(self.measurements)

    def __iter__(self):
        return iter(self.measurements)

    @property
    def track_ids(self) -> tuple[int, ...]:
        return tuple(self.by_track)

    def canonical(self) -> list[Measurement]:
        return [m for ms in self.by_track.values() for m in ms]

    def scaled(self, alpha: float) -> AssignmentSet:
        """Copy with every information matrix multiplied by ``alpha``."""
        return AssignmentSet(Measurement(m.track_id, m.z, alpha * m.omega, m.s_true) for m in self.measurements)

    def check_against(self, params: OptParamSet) -> None:
        missing = sorted(set(self.by_track) - set(params.ids))
        if missing:
            raise AssignmentError(f"measurements assigned to unknown track ids {missing}")


def _project(curve, z: np.ndarray, scan_step: float) -> np.ndarray:
    _, foot, _ = curve.project(z, scan_step)
    return z - foot


def measurement_residual(params: OptParamSet, m: Measurement, scan_step: float = DEFAULT_SCAN_STEP) -> np.ndarray:
    """Offset ``z - foot`` of one measurement from its assigned element."""
    if m.track_id not in params.ids:
        raise AssignmentError(f"unknown track id {m.track_id}")
    curve = build_chain(params).curve(m.track_id)
    return _project(curve, m.z[None, :], scan_step)[0]


def continuity_residuals(
    params: OptParamSet, sigma_pos: float = SIGMA_POS, sigma_head: float = SIGMA_HEAD
) -> np.ndarray:
    """``[dxi/sigma_pos, deta/sigma_pos, dphi/sigma_head]`` per straight after the first."""
    gaps = build_chain(params).gaps
    out = np.empty(3 * len(gaps))
    for k, g in enumerate(gaps):
        out[3 * k : 3 * k + 3] = (g.dxi / sigma_pos, g.deta / sigma_pos, g.dphi / sigma_head)
    return out


def total_error(params: OptParamSet, assignments: AssignmentSet) -> float:
    """Weighted measurement cost ``sum e^T Omega e`` (continuity excluded)."""
    return ResidualSystem(params, assignments).costs(params.vector)[0]


class ResidualSystem:
    """Stacked, whitened residual vector bound to a parameter layout.

    Parameters
    ----------
    template : OptParamSet
        Fixes the block layout; its vector is the default start point.
    assignments : AssignmentSet
    sigma_pos, sigma_head : float
        Continuity stiffness, stated for measurements carrying the default
        information ``I / DEFAULT_SIGMA**2``.
    scale_continuity : bool
        Weigh continuity terms by ``mean information / default information``
        so that a uniform rescaling of every Omega rescales the whole cost
        and leaves its minimizer unchanged.

    Notes
    -----
    With continuity scaling on, the residual vector is expressed in units of
    the mean information: each Omega is divided by ``cost_unit`` before
    whitening and continuity rows are left unscaled. A uniform Omega scaling
    then reproduces the same residuals to within rounding, so the optimizer
    follows the same path. ``costs`` multiplies back by ``cost_unit``.
    """

    def __init__(
        self,
        template: OptParamSet,
        assignments: AssignmentSet,
        sigma_pos: float = SIGMA_POS,
        sigma_head: float = SIGMA_HEAD,
        scan_step: float = DEFAULT_SCAN_STEP,
        scale_continuity: bool = True,
    ) -> None:
        assignments.check_against(template)
        self.template = template
        self.assignments = assignments
        self.sigma_pos = sigma_pos
        self.sigma_head = sigma_head
        self.scan_step = scan_step
        self.n_measurements = len(assignments)
        self.n_continuity = 3 * max(template.n_straights - 1, 0)
        self.n_residuals = 2 * self.n_measurements + self.n_continuity
        if scale_continuity and self.n_measurements:
            info = np.mean([np.trace(m.omega) / 2.0 for m in assignments])
            self.cost_unit = float(info * DEFAULT_SIGMA**2)
        else:
            self.cost_unit = 1.0
        self._groups = []
        for track_id, ms in assignments.by_track.items():
            z = np.array([m.z for m in ms])
            # Omega = L L^T, whitened residual L^T e
            omega = np.array([m.omega for m in ms]) / self.cost_unit
            lt = np.linalg.cholesky(omega).transpose(0, 2, 1)
            self._groups.append((track_id, z, lt))

    @property
    def x0(self) -> np.ndarray:
        return self.template.flatten()

    def params(self, x) -> OptParamSet:
        return self.template.unflatten(x)

    def _evaluate(self, x):
        placed = build_chain(self.template.unflatten(x))
        errors = []
        for track_id, z, lt in self._groups:
            e = _project(placed.curve(track_id), z, self.scan_step)
            errors.append((e, lt))
        cont = np.empty(3 * len(placed.gaps))
        for k, g in enumerate(placed.gaps):
            cont[3 * k : 3 * k + 3] = (g.dxi / self.sigma_pos, g.deta / self.sigma_pos, g.dphi / self.sigma_head)
        return errors, cont

    def measurement_errors(self, x) -> np.ndarray:
        """Unweighted ``e = z - foot`` in canonical order, shape (M, 2)."""
        errors, _ = self._evaluate(x)
        if not errors:
            return np.zeros((0, 2))
        return np.concatenate([e for e, _ in errors])

    def residuals(self, x) -> np.ndarray:
        errors, cont = self._evaluate(x)
        parts = [np.einsum("nij,nj->ni", lt, e).ravel() for e, lt in errors]
        parts.append(cont)
        return np.concatenate(parts)

    __call__ = residuals

    def costs(self, x) -> tuple[float, float]:
        """``(measurement F, continuity F)``, summed in a fixed order."""
        r = self.residuals(x)
        m = 2 * self.n_measurements
        return float(r[:m] @ r[:m]) * self.cost_unit, float(r[m:] @ r[m:]) * self.cost_unit


def jacobian_fd(fun: Callable[[np.ndarray], np.ndarray], x, rel_step: float = 1e-6, f0=None) -> np.ndarray:
    """Forward-difference Jacobian with steps ``rel_step * max(1, |x_j|)``."""
    x = np.asarray(x, dtype=float)
    if f0 is None:
        f0 = np.asarray(fun(x), dtype=float)
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        xp = x.copy()
        xp[j] += h
        h = xp[j] - x[j]  # representable step
        try:
            fp = np.asarray(fun(xp), dtype=float)
        except Exception as exc:
            raise JacobianError(j, exc) from exc
        jac[:, j] = (fp - f0) / h
    return jac


@dataclass
class LMConfig:
    """Levenberg-Marquardt settings (damping per Madsen, Nielsen & Tingleff)."""

    tau: float = 1e-3
    nu: float = 2.0
    rel_step_tol: float = 1e-6
    grad_tol: float = 1e-10
    max_iter: int = 100
    fd_rel_step: float = 1e-6
    max_solve_retries: int = 30
    scaling: str = "none"  # "none": damping lam*I; "more": lam*diag(J^T J), running max

    @classmethod
    def from_dict(cls, data: dict) -> LMConfig:
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown LM settings {unknown}")
        return cls(**data)


@dataclass(frozen=True)
class LMIteration:
    iteration: int
    cost: float
    step_norm: float
    damping: float
    accepted: bool
    gain_ratio: float
    evaluated: bool = True  # False for the closing step-size check, which evaluates nothing


@dataclass
class LMReport:
    x: np.ndarray
    cost: float
    termination: str
    iterations: list[LMIteration]
    initial_cost: float

    @property
    def n_iterations(self) -> int:
        """Number of trial steps evaluated (accepted or rejected)."""
        return sum(1 for it in self.iterations if it.evaluated)

    @property
    def converged(self) -> bool:
        return self.termination in ("relative_step", "gradient")

    @property
    def accepted_costs(self) -> list[float]:
        """Cost at the start point followed by the cost after each accepted step."""
        return [self.initial_cost] + [it.cost for it in self.iterations if it.accepted]

    @property
    def cost_drops(self) -> list[float]:
        c = self.accepted_costs
        return [a - b for a, b in zip(c[:-1], c[1:])]

    def rescaled(self, factor: float) -> LMReport:
        """Copy with every cost multiplied by ``factor``."""
        its = [replace(it, cost=it.cost * factor) for it in self.iterations]
        return LMReport(self.x, self.cost * factor, self.termination, its, self.initial_cost * factor)


def _damped_step(J, r, damping):
    """Solve ``(J^T J + diag(damping)) h = -J^T r`` through the stacked least-squares form.

    Working on ``[J; sqrt(D)]`` avoids squaring the condition number, which
    matters here because continuity rows are far stiffer than measurements.
    """
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(damping))):
        raise np.linalg.LinAlgError("non-finite damped system")
    n = J.shape[1]
    M = np.vstack([J, np.diag(np.sqrt(damping))])
    rhs = np.concatenate([-r, np.zeros(n)])
    q, R = np.linalg.qr(M)
    if np.min(np.abs(np.diag(R))) <= 1e-300:
        raise np.linalg.LinAlgError("singular damped system")
    return scipy.linalg.solve_triangular(R, q.T @ rhs)


def levenberg_marquardt(fun, x0, config: LMConfig | None = None, jac=None) -> LMReport:
    """Minimize ``||fun(x)||^2`` from ``x0``.

    Terminates when ``||dx|| < rel_step_tol * ||x||``, when the gradient
    infinity norm drops below ``grad_tol``, or after ``max_iter`` iterations.
    A trial point whose residual cannot be evaluated counts as a rejected step.
    """
    cfg = config or LMConfig()
    if jac is None:
        def jac(x, f):
            return jacobian_fd(fun, x, cfg.fd_rel_step, f)

    x = np.array(x0, dtype=float)
    try:
        r = np.asarray(fun(x), dtype=float)
    except _TRIAL_ERRORS as exc:
        raise LMInitializationError(f"residual not evaluable at x0: {exc}") from exc
    if not np.all(np.isfinite(r)):
        raise LMInitializationError("residual is not finite at x0")
    cost = float(r @ r)
    initial_cost = cost
    J = jac(x, r)
    A = J.T @ J
    g = J.T @ r
    if cfg.scaling not in ("none", "more"):
        raise ValueError(f"unknown scaling {cfg.scaling!r}")
    if cfg.scaling == "more":
        # a column with no sensitivity keeps a unit weight so the system stays definite
        diag = np.diag(A).copy()
        diag[diag <= 0.0] = 1.0
        lam = cfg.tau
    else:
        diag = np.ones(x.size)
        lam = cfg.tau * float(np.max(np.diag(A))) if A.size else 0.0
    nu = cfg.nu
    log: list[LMIteration] = []
    termination = "max_iterations"
    if cfg.max_iter <= 0:
        return LMReport(x, cost, termination, log, initial_cost)

    for k in range(1, cfg.max_iter + 1):
        h = None
        for _ in range(cfg.max_solve_retries):
            try:
                h = _damped_step(J, r, lam * diag)
                break
            except np.linalg.LinAlgError:
                lam = max(lam, 1e-12) * nu
                nu *= 2.0
        if h is None or not np.all(np.isfinite(h)):
            raise LMSolveError("damped normal equations are singular", lam, nu)
        step = float(np.linalg.norm(h))
        if step < cfg.rel_step_tol * (np.linalg.norm(x) + cfg.rel_step_tol):
            log.append(LMIteration(k, cost, step, lam, False, math.nan, evaluated=False))
            termination = "relative_step"
            break
        x_new = x + h
        try:
            r_new = np.asarray(fun(x_new), dtype=float)
            ok = bool(np.all(np.isfinite(r_new)))
        except _TRIAL_ERRORS:
            ok = False
        cost_new = float(r_new @ r_new) if ok else math.inf
        predicted = float(h @ (lam * diag * h - g))
        rho = (cost - cost_new) / predicted if ok and predicted > 0 else -math.inf
        if rho > 0:
            x, r, cost = x_new, r_new, cost_new
            J = jac(x, r)
            A = J.T @ J
            g = J.T @ r
            if cfg.scaling == "more":
                diag = np.maximum(diag, np.diag(A))
            lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = cfg.nu
            log.append(LMIteration(k, cost, step, lam, True, rho))
            if float(np.max(np.abs(g))) < cfg.grad_tol:
                termination = "gradient"
                break
        else:
            lam *= nu
            nu *= 2.0
            log.append(LMIteration(k, cost, step, lam, False, rho))
    return LMReport(x, cost, termination, log, initial_cost)


def assign_nearest(params: OptParamSet, points) -> list[int]:
    """Track id of the closest placed element for each point.

    A fallback for measurement files without assignments; the optimization
    itself never re-associates.
    """
    placed = build_chain(params)
    z = np.atleast_2d(np.asarray(points, dtype=float))
    best = np.full(z.shape[0], np.inf)
    ids = np.zeros(z.shape[0], dtype=int)
    for curve in placed.curves:
        _, foot, _ = curve.project(z)
        d = np.hypot(*(z - foot).T)
        closer = d < best
        best[closer] = d[closer]
        ids[closer] = curve.element.id
    return ids.tolist()


def _rank_line(u: np.ndarray) -> tuple[float, float]:
    """Least-squares line through sorted along-track coordinates versus rank."""
    k = np.arange(u.size, dtype=float)
    slope, intercept = np.polyfit(k, np.sort(u), 1)
    return float(intercept), float(intercept + slope * (u.size - 1))


def fit_terminal_extents(params: OptParamSet, assignments: AssignmentSet, min_fixes: int = 3) -> OptParamSet:
    """Re-estimate the free ends of the outer straights from their fixes.

    Foot points clamp at element ends, so fixes beyond a free end pull on
    nothing and the least-squares extent is poorly determined. Here the
    along-track coordinates of the fixes on a terminal straight are sorted
    and regressed on their rank; the fitted first (or last) coordinate
    replaces the free endpoint. Fixes are equally spaced along the track, so
    the regression is unbiased where the raw extreme fix is not. Straights
    with fewer than ``min_fixes`` fixes are left unchanged.
    """
    vec = params.flatten()
    straights = [i for i, s in enumerate(params.shapes) if s is Shape.STRAIGHT]
    if not straights:
        return params
    targets = []
    if params.shapes[0] is Shape.STRAIGHT:
        targets.append((0, "start"))
    if params.shapes[-1] is Shape.STRAIGHT:
        targets.append((params.n_blocks - 1, "end"))
    for index, side in targets:
        ms = assignments.by_track.get(params.ids[index], ())
        if len(ms) < min_fixes:
            continue
        k = params.offsets[index]
        p0, pe = vec[k : k + 2].copy(), vec[k + 2 : k + 4].copy()
        length = float(np.linalg.norm(pe - p0))
        if length == 0.0:
            continue
        d = (pe - p0) / length
        u = (np.array([m.z for m in ms]) - p0) @ d
        first, last = _rank_line(u)
        if side == "start":
            vec[k : k + 2] = p0 + min(first, length) * d
        else:
            vec[k + 2 : k + 4] = p0 + max(last, 0.0) * d
    return params.unflatten(vec)


@dataclass
class OptimizationResult:
    track_map: CompactTrackMap
    initial_params: OptParamSet
    params: OptParamSet
    report: LMReport
    system: ResidualSystem
    stitched: bool  # False when the map is a plain concatenation of the start point

    @property
    def max_gaps(self) -> tuple[float, float]:
        return build_chain(self.params).max_gaps()


def optimize_map(
    initial,
    assignments: AssignmentSet,
    config: LMConfig | None = None,
    sigma_pos: float = SIGMA_POS,
    sigma_head: float = SIGMA_HEAD,
    fit_extents: bool = True,
) -> OptimizationResult:
    """Full estimation pipeline from filter output to a compact map.

    ``initial`` is an ``InitialElementSet`` or an ``OptParamSet``. Gaps are
    filled, parameters refined by Levenberg-Marquardt, the terminal extents
    re-fitted and the chain stitched into an exact map. With
    ``config.max_iter <= 0`` nothing is refined and the initial elements are
    concatenated as they are.
    """
    cfg = config or LMConfig()
    start = initial if isinstance(initial, OptParamSet) else reparameterize(initial)
    system = ResidualSystem(start, assignments, sigma_pos, sigma_head)
    report = levenberg_marquardt(system, system.x0, cfg).rescaled(system.cost_unit)
    if cfg.max_iter <= 0:
        return OptimizationResult(naive_concatenation(start), start, start, report, system, False)
    params = system.params(report.x)
    if fit_extents:
        params = fit_terminal_extents(params, assignments)
    return OptimizationResult(emit_compact(params), start, params, report, system, True)


_CSV_REQUIRED = ["track_id", "xi_m", "eta_m"]
_CSV_OMEGA = ["omega_xx", "omega_xy", "omega_yy"]
_CSV_TRUTH = "s_true_m"


def measurements_to_csv(assignments: AssignmentSet | Iterable[Measurement]) -> str:
    """CSV text in input order; ``s_true_m`` is written when every fix has it."""
    ms = list(assignments)
    truth = bool(ms) and all(m.s_true is not None for m in ms)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_CSV_REQUIRED + _CSV_OMEGA + ([_CSV_TRUTH] if truth else []))
    for m in ms:
        row = [m.track_id, repr(float(m.z[0])), repr(float(m.z[1]))]
        row += [repr(float(m.omega[0, 0])), repr(float(m.omega[0, 1])), repr(float(m.omega[1, 1]))]
        if truth:
            row.append(repr(float(m.s_true)))
        w.writerow(row)
    return buf.getvalue()


def measurements_from_csv(text: str, source: str = "<measurements>", require_track_id: bool = True) -> AssignmentSet:
    """Parse measurement CSV text.

    Omega columns are optional as a group and default to ``I / DEFAULT_SIGMA**2``.
    Errors name the offending line. With ``require_track_id=False`` the
    ``track_id`` column may be missing or empty; such fixes get id 0 and are
    meant to be re-assigned.
    """
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise MapParseError(f"{source}: empty measurement file")
    header = [h.strip() for h in rows[0]]
    required = _CSV_REQUIRED if require_track_id else _CSV_REQUIRED[1:]
    missing = [h for h in required if h not in header]
    if missing:
        raise MapParseError(f"{source}: line 1: missing columns {missing}")
    has_omega = [h in header for h in _CSV_OMEGA]
    if any(has_omega) and not all(has_omega):
        raise MapParseError(f"{source}: line 1: omega columns must be given together")
    col = {h: i for i, h in enumerate(header)}
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MapParseError(f"{source}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            tid_text = row[col["track_id"]].strip() if "track_id" in col else ""
            if tid_text:
                track_id = int(tid_text)
            elif require_track_id:
                raise ValueError("empty track_id")
            else:
                track_id = 0
            z = (float(row[col["xi_m"]]), float(row[col["eta_m"]]))
            if all(has_omega):
                oxx, oxy, oyy = (float(row[col[h]]) for h in _CSV_OMEGA)
                omega = np.array([[oxx, oxy], [oxy, oyy]])
            else:
                omega = default_omega()
            s_true = float(row[col[_CSV_TRUTH]]) if _CSV_TRUTH in col and row[col[_CSV_TRUTH]].strip() else None
            out.append(Measurement(track_id, z, omega, s_true))
        except ValueError as exc:
            raise MapParseError(f"{source}: line {lineno}: {exc}") from exc
    if not out:
        raise MapParseError(f"{source}: no measurements")
    return AssignmentSet(out)


def save_measurements(assignments, path) -> None:
    atomic_write_text(path, measurements_to_csv(assignments))


def load_measurements(path, require_track_id: bool = True) -> AssignmentSet:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MapParseError(f"{path}: not a text file") from exc
    return measurements_from_csv(text, str(path), require_track_id)
