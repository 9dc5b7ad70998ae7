import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trackmapper.errors import (
    DegenerateParameterError,
    EmissionRefusedError,
    GeometryDomainError,
    IncompleteInputError,
    MapParseError,
    StructureError,
    UnsupportedTopologyError,
)
from trackmapper.geometry import Pose, Shape, TrackElement
from trackmapper.simulation import published_initial_elements, reference_track
from trackmapper.trackmap import (
    CompactTrackMap,
    InitialElementSet,
    InitialEntry,
    OptParamSet,
    build_chain,
    emit_compact,
    fill_gaps,
    infer_transition,
    initial_from_dict,
    initial_to_dict,
    load_initial,
    load_map,
    map_from_dict,
    map_from_table_csv,
    map_to_dict,
    map_to_table_csv,
    naive_concatenation,
    params_from_map,
    reparameterize,
    save_initial,
    save_map,
)


@pytest.fixture(scope="module")
def reference():
    return reference_track()


@pytest.fixture(scope="module")
def table3():
    return reparameterize(published_initial_elements())


def _entry(k, shape, length=100.0, radius=None, start=Pose(0, 0, 0)):
    return InitialEntry(k, shape, length, radius, start)


# --- compact map invariants ---------------------------------------------------------


def test_reference_map_shape(reference):
    assert [e.shape.value for e in reference.elements] == ["st", "ta", "ca", "ta", "st", "ta", "ca", "ta", "st"]
    assert reference.total_length == pytest.approx(4360.0)


def test_ids_must_start_at_one_and_increase():
    with pytest.raises(StructureError):
        CompactTrackMap(Pose(0, 0, 0), (TrackElement.straight(2, 10.0),))
    with pytest.raises(StructureError):
        CompactTrackMap(Pose(0, 0, 0), (TrackElement.straight(1, 10.0), TrackElement.straight(1, 10.0)))


def test_straight_next_to_arc_rejected():
    with pytest.raises(StructureError):
        CompactTrackMap(Pose(0, 0, 0), (TrackElement.straight(1, 10.0), TrackElement.circular(2, 10.0, 100.0)))


def test_curvature_jump_rejected():
    elements = (
        TrackElement.straight(1, 10.0),
        TrackElement.transition(2, 10.0, 0.0, 1 / 100),
        TrackElement.circular(3, 10.0, 200.0),
    )
    with pytest.raises(StructureError):
        CompactTrackMap(Pose(0, 0, 0), elements)


def test_sample_includes_endpoint(reference):
    smp = reference.sample(1.0)
    assert smp["s"].size == 4361
    assert smp["s"][-1] == pytest.approx(4360.0)
    assert (smp["xi"][-1], smp["eta"][-1]) == pytest.approx(tuple(reference.end.position))


def test_polyline_length_matches_total(reference):
    poly = reference.polyline(0.5)
    length = np.sum(np.hypot(*np.diff(poly, axis=0).T))
    assert abs(length - reference.total_length) <= 1e-4 * reference.total_length


# --- fill_gaps / infer_transition --------------------------------------------------


def test_fill_gaps_table2():
    filled = fill_gaps(published_initial_elements())
    assert filled.shapes == ("st", "ta", "ca", "ta", "st", "ta", "ca", "ta", "st")
    assert filled.entries[1].radius == -882.0
    assert filled.entries[7].radius == 297.0


def test_fill_gaps_single_straight_unchanged():
    initial = InitialElementSet((_entry(1, "st"),))
    assert fill_gaps(initial) == initial


def test_fill_gaps_consecutive_unknowns():
    initial = InitialElementSet(
        (_entry(1, "st"), _entry(2, "unknown", start=None), _entry(3, "unknown", start=None), _entry(4, "ca", radius=300.0))
    )
    with pytest.raises(UnsupportedTopologyError):
        fill_gaps(initial)


def test_fill_gaps_straight_next_to_arc():
    initial = InitialElementSet((_entry(1, "st"), _entry(2, "ca", radius=300.0)))
    with pytest.raises(StructureError):
        fill_gaps(initial)


def test_fill_gaps_idempotent():
    once = fill_gaps(published_initial_elements())
    assert fill_gaps(once) == once


def test_infer_transition_entering():
    ta = infer_transition(-882.0, 278.0, "entering")
    assert (ta.kappa_start, ta.kappa_end) == (0.0, pytest.approx(-1 / 882))
    assert ta.shape is Shape.TRANSITION and ta.length == 278.0


def test_infer_transition_exiting():
    ta = infer_transition(297.0, 165.0, "exiting")
    assert (ta.kappa_start, ta.kappa_end) == (pytest.approx(1 / 297), 0.0)


@pytest.mark.parametrize("radius", [math.inf, 0.0])
def test_infer_transition_bad_radius(radius):
    with pytest.raises(GeometryDomainError):
        infer_transition(radius, 100.0, "entering")


# --- reparameterization --------------------------------------------------------------


def test_reparameterize_table3(table3):
    assert table3.shapes[:3] == (Shape.STRAIGHT, Shape.TRANSITION, Shape.CIRCULAR)
    assert table3.block(0) == pytest.approx([0.0, 0.0, 1019.28, 179.73], abs=0.01)
    assert table3.block(1) == pytest.approx([278.0])
    assert table3.block(2) == pytest.approx([-882.0, 415.0])
    assert table3.block(4) == pytest.approx([1772.0, 683.0, 2338.0, 1487.0], abs=1.0)
    assert table3.size == 3 * 4 + 4 * 1 + 2 * 2


def test_reparameterize_preserves_headings(table3):
    initial = published_initial_elements()
    for k, e in enumerate(initial.entries):
        if e.shape == "st":
            x0, y0, xe, ye = table3.block(k)
            assert math.atan2(ye - y0, xe - x0) == pytest.approx(e.start.phi, abs=1e-9)


def test_reparameterize_needs_straight_start():
    initial = InitialElementSet((_entry(1, "st", start=None),))
    with pytest.raises(IncompleteInputError):
        reparameterize(initial)


def test_flatten_unflatten_inverse(table3):
    x = table3.flatten()
    again = table3.unflatten(x)
    assert np.array_equal(again.vector, table3.vector)
    assert again.ids == table3.ids and again.shapes == table3.shapes
    assert table3.labels()[:5] == ["1.xi0", "1.eta0", "1.xie", "1.etae", "2.L"]


def test_param_vector_is_read_only(table3):
    with pytest.raises(ValueError):
        table3.vector[0] = 1.0


def test_wrong_block_size_rejected():
    with pytest.raises(StructureError):
        OptParamSet.from_blocks([1], ["st"], [[0.0, 0.0, 1.0]])


# --- chain building and emission ----------------------------------------------------


def test_table3_chain_has_gaps(table3):
    placed = build_chain(table3)
    assert [g.element_id for g in placed.gaps] == [5, 9]
    assert all(g.position > 10.0 for g in placed.gaps)
    # arc groups chain exactly
    for a, b in zip(placed.curves[:3], placed.curves[1:4]):
        assert b.start.position == pytest.approx(a.end.position, abs=1e-9)


def test_roundtrip_params_have_no_gaps(reference):
    placed = build_chain(params_from_map(reference))
    assert max(g.position for g in placed.gaps) <= 1e-9
    assert max(abs(g.dphi) for g in placed.gaps) <= 1e-12


def test_single_straight_chain():
    params = OptParamSet.from_blocks([1], ["st"], [[0.0, 0.0, 10.0, 0.0]])
    placed = build_chain(params)
    assert len(placed.curves) == 1 and placed.gaps == ()


def test_zero_length_straight():
    params = OptParamSet.from_blocks([1], ["st"], [[1.0, 1.0, 1.0, 1.0]])
    with pytest.raises(DegenerateParameterError):
        build_chain(params)


def test_emit_fixed_point(reference):
    out = emit_compact(params_from_map(reference))
    assert out.anchor.position == pytest.approx(reference.anchor.position, abs=1e-12)
    assert out.anchor.phi == pytest.approx(reference.anchor.phi, abs=1e-12)
    for a, b in zip(out.elements, reference.elements):
        assert a.shape is b.shape and a.id == b.id
        assert a.length == pytest.approx(b.length, abs=1e-9)
        assert a.kappa_start == pytest.approx(b.kappa_start, abs=1e-15)


def test_emit_refuses_large_gap(reference):
    vec = params_from_map(reference).flatten()
    vec[-4:-2] += [10.0, 0.0]  # shift the start of the last straight
    params = params_from_map(reference).unflatten(vec)
    with pytest.raises(EmissionRefusedError) as info:
        emit_compact(params)
    assert any(g.element_id == 9 and g.position > 9.0 for g in info.value.gaps)


def test_emit_absorbs_small_gap(reference):
    base = params_from_map(reference)
    vec = base.flatten()
    vec[-4:] += [0.2, -0.1, 0.2, -0.1]  # small offset of the last straight
    out = emit_compact(base.unflatten(vec))
    gaps = build_chain(params_from_map(out)).gaps
    assert max(g.position for g in gaps) <= 1e-9
    poly = out.polyline(0.5)
    length = np.sum(np.hypot(*np.diff(poly, axis=0).T))
    assert abs(length - out.total_length) <= 1e-4 * out.total_length


def test_naive_concatenation_keeps_lengths(table3):
    naive = naive_concatenation(table3)
    assert naive.elements[4].length == pytest.approx(np.hypot(2338 - 1772, 1487 - 683), abs=1.0)
    assert naive.anchor.position == pytest.approx([0.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(
    lengths=st.lists(st.floats(20.0, 500.0), min_size=7, max_size=7),
    radii=st.lists(st.floats(200.0, 2000.0), min_size=2, max_size=2),
    signs=st.lists(st.sampled_from([-1.0, 1.0]), min_size=2, max_size=2),
)
def test_emit_output_valid_for_random_tracks(lengths, radii, signs):
    r1, r2 = radii[0] * signs[0], radii[1] * signs[1]
    elements = [
        TrackElement.straight(1, lengths[0]),
        TrackElement.transition(2, lengths[1], 0.0, 1 / r1),
        TrackElement.circular(3, lengths[2], r1),
        TrackElement.transition(4, lengths[3], 1 / r1, 0.0),
        TrackElement.straight(5, lengths[4]),
        TrackElement.transition(6, lengths[5], 0.0, 1 / r2),
        TrackElement.circular(7, lengths[6], r2),
    ]
    track = CompactTrackMap(Pose(3.0, 4.0, 0.5), tuple(elements))
    out = emit_compact(params_from_map(track))
    assert max(g.position for g in build_chain(params_from_map(out)).gaps) <= 1e-9
    assert out.total_length == pytest.approx(track.total_length, rel=1e-9)


# --- serialization ------------------------------------------------------------------


def test_map_json_roundtrip(tmp_path, reference):
    path = tmp_path / "map.json"
    save_map(reference, path)
    back = load_map(path)
    assert back.anchor == reference.anchor
    assert back.elements == reference.elements


def test_map_json_schema(reference):
    d = map_to_dict(reference)
    assert d["anchor"] == {"xi_m": 0.0, "eta_m": 0.0, "phi_deg": pytest.approx(10.0)}
    assert d["elements"][0] == {"id": 1, "shape": "st", "length_m": 1000.0, "radius_m": None}
    assert d["elements"][1]["radius_m"] == pytest.approx(-900.0)


def _mutated(reference, k, **changes):
    d = map_to_dict(reference)
    d["elements"][k].update(changes)
    return d


def test_unknown_shape_tag(reference):
    with pytest.raises(MapParseError, match=r"elements\[2\]\.shape"):
        map_from_dict(_mutated(reference, 2, shape="xx"))


def test_negative_length(reference):
    with pytest.raises(MapParseError, match=r"elements\[0\]\.length_m"):
        map_from_dict(_mutated(reference, 0, length_m=-5.0))


def test_transition_radius_validated(reference):
    with pytest.raises(MapParseError, match=r"elements\[1\]\.radius_m"):
        map_from_dict(_mutated(reference, 1, radius_m=-850.0))


def test_missing_anchor_field(reference):
    d = map_to_dict(reference)
    del d["anchor"]["eta_m"]
    with pytest.raises(MapParseError, match="anchor.eta_m"):
        map_from_dict(d)


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(MapParseError):
        load_map(path)


def test_table_csv_roundtrip(tmp_path, reference):
    text = map_to_table_csv(reference)
    rows = text.splitlines()
    assert rows[1] == "id,shape,length_m,radius_m"
    assert rows[2] == "1,st,1000.0,inf"
    assert rows[4] == "3,ca,476.0,-900.0"
    assert len(rows) == 11
    back = map_from_table_csv(text)
    assert back.elements == reference.elements
    path = tmp_path / "map.csv"
    path.write_text(text)
    assert load_map(path).elements == reference.elements


def test_table_csv_bad_row(reference):
    text = map_to_table_csv(reference).replace("476.0", "abc")
    with pytest.raises(MapParseError, match="line 5"):
        map_from_table_csv(text)


def test_initial_json_roundtrip(tmp_path):
    initial = published_initial_elements()
    path = tmp_path / "initial.json"
    save_initial(initial, path)
    back = load_initial(path)
    assert back.shapes == initial.shapes
    for a, b in zip(back.entries, initial.entries):
        assert a.length == b.length and a.radius == b.radius
        assert a.start.position == pytest.approx(b.start.position)
        assert a.start.phi == pytest.approx(b.start.phi, abs=1e-15)
    assert json.loads(path.read_text())["elements"][1]["shape"] == "unknown"


def test_initial_bad_shape():
    d = initial_to_dict(published_initial_elements())
    d["elements"][3]["shape"] = "arc"
    with pytest.raises(MapParseError, match=r"elements\[3\]\.shape"):
        initial_from_dict(d)
