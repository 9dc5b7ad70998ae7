"""Compact track-map model, gap filling, optimization parameterization and I/O.

A compact map is an anchor pose followed by an ordered list of elements.
For optimization the same track is described by an :class:`OptParamSet`:
straights carry absolute endpoints ``[xi0, eta0, xie, etae]``, transitional
arcs only their length ``[L]`` and circular arcs ``[r, L]``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateParameterError,
    EmissionRefusedError,
    GeometryDomainError,
    IncompleteInputError,
    MapParseError,
    StructureError,
    UnsupportedTopologyError,
)
from .geometry import ElementCurve, Pose, Shape, TrackElement, wrap_angle

__all__ = [
    "UNKNOWN",
    "InitialEntry",
    "InitialElementSet",
    "CompactTrackMap",
    "OptParamSet",
    "ContinuityGap",
    "PlacedTrack",
    "fill_gaps",
    "infer_transition",
    "transition_kappas",
    "reparameterize",
    "build_chain",
    "emit_compact",
    "naive_concatenation",
    "params_from_map",
    "map_to_dict",
    "map_from_dict",
    "save_map",
    "load_map",
    "initial_to_dict",
    "initial_from_dict",
    "save_initial",
    "load_initial",
    "map_to_table_csv",
    "map_from_table_csv",
    "atomic_write_text",
]

UNKNOWN = "unknown"
BLOCK_SIZE = {Shape.STRAIGHT: 4, Shape.TRANSITION: 1, Shape.CIRCULAR: 2}
ENTERING, EXITING = "entering", "exiting"


# ---------------------------------------------------------------------------
# shape grammar


def _check_grammar(shapes: Sequence[Shape], ids: Sequence[int]) -> None:
    for k, (a, b) in enumerate(zip(shapes[:-1], shapes[1:])):
        if {a, b} == {Shape.STRAIGHT, Shape.CIRCULAR}:
            raise StructureError(
                f"elements {ids[k]} and {ids[k + 1]}: a straight and a circular arc "
                "must be joined by a transitional arc"
            )
    for k, s in enumerate(shapes):
        if s is not Shape.TRANSITION:
            continue
        prev = shapes[k - 1] if k > 0 else None
        nxt = shapes[k + 1] if k + 1 < len(shapes) else None
        if {prev, nxt} != {Shape.STRAIGHT, Shape.CIRCULAR}:
            raise StructureError(
                f"element {ids[k]}: a transitional arc must sit between a straight and a circular arc"
            )


def transition_kappas(prev_shape, next_shape, radius: float) -> tuple[float, float]:
    """End curvatures of a transition from its neighbors and the arc radius."""
    if radius is None or not math.isfinite(radius) or radius == 0.0:
        raise GeometryDomainError(f"transition radius must be finite and nonzero, got {radius}")
    if prev_shape is Shape.STRAIGHT and next_shape is Shape.CIRCULAR:
        return 0.0, 1.0 / radius
    if prev_shape is Shape.CIRCULAR and next_shape is Shape.STRAIGHT:
        return 1.0 / radius, 0.0
    raise StructureError("a transitional arc must sit between a straight and a circular arc")


def infer_transition(neighbor_radius: float, gap_length: float, side: str, id: int = 0) -> TrackElement:
    """Clothoid filling a gap next to a circular arc of ``neighbor_radius``.

    ``side="entering"`` runs from the straight into the arc (curvature 0 to
    ``1/r``), ``"exiting"`` the other way round.
    """
    if not (math.isfinite(neighbor_radius) and neighbor_radius != 0.0):
        raise GeometryDomainError(f"neighbor radius must be finite and nonzero, got {neighbor_radius}")
    if not gap_length > 0.0:
        raise GeometryDomainError(f"gap length must be > 0, got {gap_length}")
    kappa = 1.0 / neighbor_radius
    if side == ENTERING:
        return TrackElement.transition(id, gap_length, 0.0, kappa)
    if side == EXITING:
        return TrackElement.transition(id, gap_length, kappa, 0.0)
    raise ValueError(f"side must be {ENTERING!r} or {EXITING!r}, got {side!r}")


# ---------------------------------------------------------------------------
# compact map


@dataclass(frozen=True)
class CompactTrackMap:
    """Anchor pose plus an ordered, curvature-continuous element sequence."""

    anchor: Pose
    elements: tuple[TrackElement, ...] = ()

    def __post_init__(self) -> None:
        elements = tuple(self.elements)
        object.__setattr__(self, "elements", elements)
        ids = [e.id for e in elements]
        if ids and ids[0] != 1:
            raise StructureError(f"element ids must start at 1, got {ids[0]}")
        if any(b <= a for a, b in zip(ids[:-1], ids[1:])):
            raise StructureError(f"element ids must be strictly increasing: {ids}")
        _check_grammar([e.shape for e in elements], ids)
        for a, b in zip(elements[:-1], elements[1:]):
            scale = max(abs(a.kappa_end), abs(b.kappa_start), 1e-300)
            if abs(a.kappa_end - b.kappa_start) > 1e-9 * scale:
                raise StructureError(f"curvature jump between elements {a.id} and {b.id}")

    @property
    def total_length(self) -> float:
        return float(sum(e.length for e in self.elements))

    @cached_property
    def curves(self) -> tuple[ElementCurve, ...]:
        out = []
        pose = self.anchor
        for e in self.elements:
            c = ElementCurve(e, pose)
            out.append(c)
            pose = c.end
        return tuple(out)

    @property
    def end(self) -> Pose:
        return self.curves[-1].end if self.elements else self.anchor

    @cached_property
    def element_offsets(self) -> np.ndarray:
        """Global arc length at the start of each element, plus the total."""
        return np.concatenate([[0.0], np.cumsum([e.length for e in self.elements])])

    def sample(self, spacing: float) -> dict[str, np.ndarray]:
        """Samples every ``spacing`` meters of global arc length, endpoint included.

        Returns arrays ``s``, ``xi``, ``eta``, ``phi`` (wrapped) and ``kappa``.
        """
        if not spacing > 0.0:
            raise GeometryDomainError(f"spacing must be > 0, got {spacing}")
        if not self.elements:
            raise GeometryDomainError("cannot sample an empty map")
        total = self.total_length
        s = np.arange(0.0, total, spacing)
        if total - s[-1] > 1e-9 * max(1.0, total):
            s = np.append(s, total)
        else:
            s[-1] = total
        offsets = self.element_offsets
        idx = np.clip(np.searchsorted(offsets, s, side="right") - 1, 0, len(self.elements) - 1)
        xy = np.empty((s.size, 2))
        phi = np.empty(s.size)
        kappa = np.empty(s.size)
        for k, curve in enumerate(self.curves):
            sel = idx == k
            if not np.any(sel):
                continue
            local = np.clip(s[sel] - offsets[k], 0.0, curve.length)
            xy[sel] = curve.positions(local)
            phi[sel] = curve.headings(local)
            kappa[sel] = curve.curvatures(local)
        return {"s": s, "xi": xy[:, 0], "eta": xy[:, 1], "phi": wrap_angle(phi), "kappa": kappa}

    def polyline(self, spacing: float = 1.0) -> np.ndarray:
        smp = self.sample(spacing)
        return np.column_stack([smp["xi"], smp["eta"]])


# ---------------------------------------------------------------------------
# filter output (initial element set)


@dataclass(frozen=True)
class InitialEntry:
    """One row of the filter output; ``shape`` may be ``"unknown"``."""

    id: int
    shape: str
    length: float
    radius: float | None = None
    start: Pose | None = None

    def __post_init__(self) -> None:
        shape = self.shape.value if isinstance(self.shape, Shape) else str(self.shape)
        if shape not in (UNKNOWN, "st", "ta", "ca"):
            raise MapParseError(f"entry {self.id}: unknown shape tag {shape!r}")
        object.__setattr__(self, "shape", shape)
        if not (math.isfinite(self.length) and self.length > 0.0):
            raise MapParseError(f"entry {self.id}: length must be > 0, got {self.length}")
        if shape == UNKNOWN and self.radius is not None:
            raise MapParseError(f"entry {self.id}: unknown entries carry no radius")
        if shape == "ca" and (self.radius is None or not math.isfinite(self.radius) or self.radius == 0):
            raise MapParseError(f"entry {self.id}: circular arc needs a finite nonzero radius")


@dataclass(frozen=True)
class InitialElementSet:
    entries: tuple[InitialEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def shapes(self) -> tuple[str, ...]:
        return tuple(e.shape for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def fill_gaps(initial: InitialElementSet) -> InitialElementSet:
    """Resolve every unknown entry to a transitional arc.

    The transition inherits the radius of its circular-arc neighbor. The
    result's ``shapes`` is the completed shape sequence; already resolved
    input comes back unchanged.
    """
    entries = list(initial.entries)
    ids = [e.id for e in entries]
    for k, e in enumerate(entries):
        if e.shape != UNKNOWN:
            continue
        prev = entries[k - 1] if k > 0 else None
        nxt = entries[k + 1] if k + 1 < len(entries) else None
        if (prev is not None and prev.shape == UNKNOWN) or (nxt is not None and nxt.shape == UNKNOWN):
            raise UnsupportedTopologyError(f"entry {e.id}: consecutive unknown elements are not supported")
        if prev is None or nxt is None:
            raise UnsupportedTopologyError(f"entry {e.id}: an unknown element needs known neighbors on both sides")
        pair = (prev.shape, nxt.shape)
        if pair == ("st", "ca"):
            radius = nxt.radius
        elif pair == ("ca", "st"):
            radius = prev.radius
        else:
            raise StructureError(
                f"entry {e.id}: gap between {prev.shape} and {nxt.shape} cannot be a transitional arc"
            )
        entries[k] = InitialEntry(e.id, "ta", e.length, radius, e.start)
    _check_grammar([Shape(e.shape) for e in entries], ids)
    return InitialElementSet(tuple(entries))


# ---------------------------------------------------------------------------
# optimization parameters


@dataclass(frozen=True, eq=False)
class OptParamSet:
    """Per-element parameter blocks flattened into one vector.

    Block layout: straight ``[xi0, eta0, xie, etae]``, transitional arc
    ``[L]``, circular arc ``[r, L]``.
    """

    ids: tuple[int, ...]
    shapes: tuple[Shape, ...]
    vector: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "shapes", tuple(Shape(s) for s in self.shapes))
        if len(self.ids) != len(self.shapes):
            raise StructureError("ids and shapes differ in length")
        vec = np.array(self.vector, dtype=float).ravel()
        if vec.size != sum(BLOCK_SIZE[s] for s in self.shapes):
            raise StructureError(f"parameter vector has {vec.size} entries, layout needs {self.size}")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @classmethod
    def from_blocks(cls, ids, shapes, blocks) -> OptParamSet:
        shapes = [Shape(s) for s in shapes]
        for i, s, b in zip(ids, shapes, blocks):
            if len(b) != BLOCK_SIZE[s]:
                raise StructureError(f"element {i}: {s} block needs {BLOCK_SIZE[s]} values, got {len(b)}")
        flat = np.concatenate([np.asarray(b, dtype=float) for b in blocks]) if blocks else np.zeros(0)
        return cls(tuple(ids), tuple(shapes), flat)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        out, k = [], 0
        for s in self.shapes:
            out.append(k)
            k += BLOCK_SIZE[s]
        return tuple(out)

    @property
    def size(self) -> int:
        return sum(BLOCK_SIZE[s] for s in self.shapes)

    @property
    def n_blocks(self) -> int:
        return len(self.shapes)

    def block(self, index: int) -> np.ndarray:
        k = self.offsets[index]
        return self.vector[k : k + BLOCK_SIZE[self.shapes[index]]]

    @property
    def blocks(self) -> list[np.ndarray]:
        return [self.block(i) for i in range(self.n_blocks)]

    def index_of(self, track_id: int) -> int:
        try:
            return self.ids.index(track_id)
        except ValueError:
            raise KeyError(track_id) from None

    def flatten(self) -> np.ndarray:
        return self.vector.copy()

    def unflatten(self, x) -> OptParamSet:
        return OptParamSet(self.ids, self.shapes, x)

    def labels(self) -> list[str]:
        names = {
            Shape.STRAIGHT: ("xi0", "eta0", "xie", "etae"),
            Shape.TRANSITION: ("L",),
            Shape.CIRCULAR: ("r", "L"),
        }
        return [f"{i}.{n}" for i, s in zip(self.ids, self.shapes) for n in names[s]]

    @property
    def n_straights(self) -> int:
        return sum(1 for s in self.shapes if s is Shape.STRAIGHT)


def reparameterize(initial: InitialElementSet) -> OptParamSet:
    """Filter output to optimization blocks.

    Straight endpoints are ``p0`` and ``p0 + L (cos phi0, sin phi0)``; arcs
    keep intrinsic values only.
    """
    filled = fill_gaps(initial)
    blocks = []
    for e in filled.entries:
        if e.shape == "st":
            if e.start is None:
                raise IncompleteInputError(f"straight {e.id} has no start pose")
            p0 = e.start.position
            blocks.append(np.concatenate([p0, p0 + e.length * e.start.tangent]))
        elif e.shape == "ta":
            blocks.append([e.length])
        else:
            blocks.append([e.radius, e.length])
    return OptParamSet.from_blocks([e.id for e in filled.entries], [e.shape for e in filled.entries], blocks)


# ---------------------------------------------------------------------------
# chain placement


@dataclass(frozen=True)
class ContinuityGap:
    """Offset of a straight's stored start from the preceding chain end."""

    element_id: int
    dxi: float
    deta: float
    dphi: float

    @property
    def position(self) -> float:
        return math.hypot(self.dxi, self.deta)


@dataclass(frozen=True)
class PlacedTrack:
    curves: tuple[ElementCurve, ...]
    gaps: tuple[ContinuityGap, ...] = ()

    @property
    def placements(self) -> list[tuple[TrackElement, Pose]]:
        return [(c.element, c.start) for c in self.curves]

    @cached_property
    def _by_id(self) -> dict[int, ElementCurve]:
        return {c.element.id: c for c in self.curves}

    def curve(self, track_id: int) -> ElementCurve:
        return self._by_id[track_id]

    def max_gaps(self) -> tuple[float, float]:
        if not self.gaps:
            return 0.0, 0.0
        return max(g.position for g in self.gaps), max(abs(g.dphi) for g in self.gaps)

    def polylines(self, spacing: float = 1.0) -> list[np.ndarray]:
        out = []
        for c in self.curves:
            s = np.append(np.arange(0.0, c.length, spacing), c.length)
            out.append(c.positions(s))
        return out


def _straight_from_block(track_id: int, block) -> tuple[TrackElement, Pose]:
    x0, y0, xe, ye = (float(v) for v in block)
    length = math.hypot(xe - x0, ye - y0)
    if not (math.isfinite(length) and length > 1e-9):
        raise DegenerateParameterError(f"straight {track_id}: coincident endpoints")
    return TrackElement.straight(track_id, length), Pose(x0, y0, math.atan2(ye - y0, xe - x0))


def _arc_element(params: OptParamSet, k: int) -> TrackElement:
    track_id, shape = params.ids[k], params.shapes[k]
    try:
        if shape is Shape.CIRCULAR:
            r, length = params.block(k)
            return TrackElement.circular(track_id, float(length), float(r))
        prev = params.shapes[k - 1] if k > 0 else None
        nxt = params.shapes[k + 1] if k + 1 < params.n_blocks else None
        arc = k + 1 if nxt is Shape.CIRCULAR else k - 1
        if prev is None or nxt is None:
            raise StructureError(f"element {track_id}: transitional arc at sequence edge")
        k0, k1 = transition_kappas(prev, nxt, float(params.block(arc)[0]))
        return TrackElement.transition(track_id, float(params.block(k)[0]), k0, k1)
    except GeometryDomainError as exc:
        raise DegenerateParameterError(str(exc)) from exc


def build_chain(params: OptParamSet) -> PlacedTrack:
    """Place every element and record continuity gaps at each later straight.

    Straights sit on their own endpoint blocks; arc groups are concatenated
    forward from the end of the preceding element.
    """
    _check_grammar(params.shapes, params.ids)
    curves: list[ElementCurve] = []
    gaps: list[ContinuityGap] = []
    chain_end: Pose | None = None
    for k, (track_id, shape) in enumerate(zip(params.ids, params.shapes)):
        if shape is Shape.STRAIGHT:
            element, start = _straight_from_block(track_id, params.block(k))
            if chain_end is not None:
                gaps.append(
                    ContinuityGap(
                        track_id,
                        start.xi - chain_end.xi,
                        start.eta - chain_end.eta,
                        wrap_angle(start.phi - chain_end.phi),
                    )
                )
        else:
            if chain_end is None:
                raise StructureError(f"element {track_id}: the sequence must start with a straight")
            element, start = _arc_element(params, k), chain_end
        curve = ElementCurve(element, start)
        curves.append(curve)
        chain_end = curve.end
    return PlacedTrack(tuple(curves), tuple(gaps))


def emit_compact(
    params: OptParamSet,
    max_position_gap: float = 0.5,
    max_heading_gap: float = 0.01,
) -> CompactTrackMap:
    """Stitch optimized parameters into an exactly continuous compact map.

    Each straight after the first restarts at the chain end with the
    chain-end heading; its length is the projection of its stored endpoint
    onto that heading.
    """
    placed = build_chain(params)
    too_big = [g for g in placed.gaps if g.position > max_position_gap or abs(g.dphi) > max_heading_gap]
    if too_big:
        worst = max(too_big, key=lambda g: g.position)
        raise EmissionRefusedError(
            f"continuity gap too large at element {worst.element_id}: "
            f"{worst.position:.3f} m / {math.degrees(worst.dphi):.3f} deg",
            placed.gaps,
        )
    return _concatenate(params, stitch=True)


def naive_concatenation(params: OptParamSet) -> CompactTrackMap:
    """Chain every element from the first straight's start, ignoring stored positions."""
    return _concatenate(params, stitch=False)


def _concatenate(params: OptParamSet, stitch: bool) -> CompactTrackMap:
    _check_grammar(params.shapes, params.ids)
    elements: list[TrackElement] = []
    anchor: Pose | None = None
    chain_end: Pose | None = None
    for k, (track_id, shape) in enumerate(zip(params.ids, params.shapes)):
        if shape is Shape.STRAIGHT:
            element, start = _straight_from_block(track_id, params.block(k))
            if chain_end is None:
                anchor = start
            elif stitch:
                end = params.block(k)[2:4]
                length = float((end - chain_end.position) @ chain_end.tangent)
                if not length > 0.0:
                    raise DegenerateParameterError(f"straight {track_id}: stitched length {length:.3f} m <= 0")
                element = TrackElement.straight(track_id, length)
        else:
            if chain_end is None:
                raise StructureError(f"element {track_id}: the sequence must start with a straight")
            element = _arc_element(params, k)
        elements.append(element)
        chain_end = ElementCurve(element, chain_end if chain_end is not None else anchor).end
    if anchor is None:
        raise StructureError("parameter set contains no straight")
    return CompactTrackMap(anchor, tuple(elements))


def params_from_map(track_map: CompactTrackMap) -> OptParamSet:
    """Optimization blocks that reproduce ``track_map`` exactly."""
    blocks = []
    for c in track_map.curves:
        e = c.element
        if e.shape is Shape.STRAIGHT:
            blocks.append(np.concatenate([c.start.position, c.end.position]))
        elif e.shape is Shape.TRANSITION:
            blocks.append([e.length])
        else:
            blocks.append([e.radius, e.length])
    elements = track_map.elements
    return OptParamSet.from_blocks([e.id for e in elements], [e.shape for e in elements], blocks)


# ---------------------------------------------------------------------------
# serialization


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pose_to_dict(p: Pose) -> dict:
    return {"xi_m": p.xi, "eta_m": p.eta, "phi_deg": p.phi_deg}


def _number(obj: dict, key: str, where: str, allow_null: bool = False):
    if key not in obj:
        raise MapParseError(f"{where}.{key}: missing")
    v = obj[key]
    if v is None and allow_null:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MapParseError(f"{where}.{key}: expected a number, got {v!r}")
    if not math.isfinite(v):
        raise MapParseError(f"{where}.{key}: must be finite")
    return float(v)


def _pose_from_dict(obj, where: str) -> Pose:
    if not isinstance(obj, dict):
        raise MapParseError(f"{where}: expected an object")
    return Pose.from_degrees(
        _number(obj, "xi_m", where), _number(obj, "eta_m", where), _number(obj, "phi_deg", where)
    )


def _element_id(obj: dict, where: str) -> int:
    v = obj.get("id")
    if isinstance(v, bool) or not isinstance(v, int):
        raise MapParseError(f"{where}.id: expected an integer, got {v!r}")
    return v


def map_to_dict(track_map: CompactTrackMap) -> dict:
    return {
        "anchor": _pose_to_dict(track_map.anchor),
        "elements": [
            {
                "id": e.id,
                "shape": e.shape.value,
                "length_m": e.length,
                "radius_m": None if e.shape is Shape.STRAIGHT else e.radius,
            }
            for e in track_map.elements
        ],
    }


def map_from_dict(data) -> CompactTrackMap:
    """Build a map from the JSON schema; errors name the offending field."""
    if not isinstance(data, dict):
        raise MapParseError("map: expected an object")
    anchor = _pose_from_dict(data.get("anchor"), "anchor")
    raw = data.get("elements")
    if not isinstance(raw, list):
        raise MapParseError("elements: expected a list")
    rows = []
    for k, obj in enumerate(raw):
        where = f"elements[{k}]"
        if not isinstance(obj, dict):
            raise MapParseError(f"{where}: expected an object")
        shape_tag = obj.get("shape")
        try:
            shape = Shape(shape_tag)
        except ValueError:
            raise MapParseError(f"{where}.shape: unknown shape tag {shape_tag!r}") from None
        length = _number(obj, "length_m", where)
        if not length > 0.0:
            raise MapParseError(f"{where}.length_m: must be > 0, got {length}")
        radius = _number(obj, "radius_m", where, allow_null=True) if "radius_m" in obj else None
        if shape is not Shape.STRAIGHT and (radius is None or radius == 0.0):
            raise MapParseError(f"{where}.radius_m: {shape.value} needs a finite nonzero radius")
        rows.append((_element_id(obj, where), shape, length, radius))
    return _map_from_rows(anchor, rows)


def _map_from_rows(anchor: Pose, rows) -> CompactTrackMap:
    shapes = [r[1] for r in rows]
    elements = []
    for k, (track_id, shape, length, radius) in enumerate(rows):
        where = f"elements[{k}]"
        try:
            if shape is Shape.STRAIGHT:
                elements.append(TrackElement.straight(track_id, length))
            elif shape is Shape.CIRCULAR:
                elements.append(TrackElement.circular(track_id, length, radius))
            else:
                prev = shapes[k - 1] if k > 0 else None
                nxt = shapes[k + 1] if k + 1 < len(shapes) else None
                k0, k1 = transition_kappas(prev, nxt, radius)
                arc_radius = rows[k + 1][3] if nxt is Shape.CIRCULAR else rows[k - 1][3]
                if abs(radius - arc_radius) > 1e-9 * abs(arc_radius):
                    raise MapParseError(
                        f"{where}.radius_m: {radius} disagrees with neighboring circular arc {arc_radius}"
                    )
                elements.append(TrackElement.transition(track_id, length, k0, k1))
        except (StructureError, GeometryDomainError) as exc:
            raise MapParseError(f"{where}: {exc}") from exc
    try:
        return CompactTrackMap(anchor, tuple(elements))
    except StructureError as exc:
        raise MapParseError(f"elements: {exc}") from exc


def save_map(track_map: CompactTrackMap, path) -> None:
    atomic_write_text(path, json.dumps(map_to_dict(track_map), indent=2) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MapParseError(f"{path}: invalid JSON ({exc})") from exc


def load_map(path) -> CompactTrackMap:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return map_from_table_csv(path.read_text(encoding="utf-8"))
    return map_from_dict(_read_json(path))


def initial_to_dict(initial: InitialElementSet) -> dict:
    out = []
    for e in initial.entries:
        row = {"id": e.id, "shape": e.shape, "length_m": e.length, "radius_m": e.radius}
        if e.start is not None:
            row["start"] = _pose_to_dict(e.start)
        out.append(row)
    return {"elements": out}


def initial_from_dict(data) -> InitialElementSet:
    if not isinstance(data, dict) or not isinstance(data.get("elements"), list):
        raise MapParseError("elements: expected a list")
    entries = []
    for k, obj in enumerate(data["elements"]):
        where = f"elements[{k}]"
        if not isinstance(obj, dict):
            raise MapParseError(f"{where}: expected an object")
        shape = obj.get("shape")
        if shape not in (UNKNOWN, "st", "ta", "ca"):
            raise MapParseError(f"{where}.shape: unknown shape tag {shape!r}")
        length = _number(obj, "length_m", where)
        if not length > 0.0:
            raise MapParseError(f"{where}.length_m: must be > 0, got {length}")
        radius = _number(obj, "radius_m", where, allow_null=True) if "radius_m" in obj else None
        start = _pose_from_dict(obj["start"], f"{where}.start") if obj.get("start") is not None else None
        try:
            entries.append(InitialEntry(_element_id(obj, where), shape, length, radius, start))
        except MapParseError as exc:
            raise MapParseError(f"{where}: {exc}") from exc
    return InitialElementSet(tuple(entries))


def save_initial(initial: InitialElementSet, path) -> None:
    atomic_write_text(path, json.dumps(initial_to_dict(initial), indent=2) + "\n")


def load_initial(path) -> InitialElementSet:
    return initial_from_dict(_read_json(path))


_TABLE_HEADER = ["id", "shape", "length_m", "radius_m"]


def map_to_table_csv(track_map: CompactTrackMap) -> str:
    """Table-style CSV: one row per element, anchor in a leading comment line."""
    buf = io.StringIO()
    a = track_map.anchor
    buf.write(f"# anchor xi_m={a.xi!r} eta_m={a.eta!r} phi_deg={a.phi_deg!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_TABLE_HEADER)
    for e in track_map.elements:
        w.writerow([e.id, e.shape.value, repr(e.length), "inf" if e.shape is Shape.STRAIGHT else repr(e.radius)])
    return buf.getvalue()


def map_from_table_csv(text: str) -> CompactTrackMap:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# anchor"):
        raise MapParseError("line 1: expected '# anchor xi_m=.. eta_m=.. phi_deg=..'")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[0][len("# anchor") :].split())
        anchor = Pose.from_degrees(float(fields["xi_m"]), float(fields["eta_m"]), float(fields["phi_deg"]))
    except (KeyError, ValueError) as exc:
        raise MapParseError(f"line 1: bad anchor ({exc})") from exc
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header != _TABLE_HEADER:
        raise MapParseError(f"line 2: expected header {','.join(_TABLE_HEADER)}")
    rows = []
    for lineno, rec in enumerate(reader, start=3):
        try:
            track_id, tag, length, radius = rec
            shape = Shape(tag)
            length = float(length)
            radius = None if shape is Shape.STRAIGHT else float(radius)
            rows.append((int(track_id), shape, length, radius))
        except ValueError as exc:
            raise MapParseError(f"line {lineno}: {exc}") from exc
        if not length > 0.0:
            raise MapParseError(f"line {lineno}: length_m must be > 0")
    return _map_from_rows(anchor, rows)

