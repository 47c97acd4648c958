import json

import numpy as np
import pytest

from saferetract.environment import ACTIONS, EnvConfig
from saferetract.interval import Box, Interval
from saferetract.network import random_network
from saferetract.property import (
    ActionNotSelected,
    OutputBound,
    PropertyFormatError,
    PropertySuite,
    SafetyProperty,
    default_suite,
    load_suite,
    parse_suite,
    save_suite,
    suite_to_dict,
)


def one_bound_doc(**overrides):
    prop = {
        "name": "y0_positive",
        "input_box": [[0.0, 1.0], [-1.0, 1.0]],
        "condition": {"kind": "output_bound", "output_index": 0, "required": [0.0, 10.0]},
    }
    prop.update(overrides)
    return {"version": 1, "properties": [prop]}


def test_parse_single_output_bound():
    suite = parse_suite(one_bound_doc())
    assert len(suite) == 1
    p = suite["y0_positive"]
    assert p.condition == OutputBound(0, Interval(0.0, 10.0))
    assert p.input_box == Box([0.0, -1.0], [1.0, 1.0])


def test_parse_accepts_json_text():
    assert len(parse_suite(json.dumps(one_bound_doc()))) == 1


def test_reversed_bound_names_property_and_dimension():
    doc = one_bound_doc(input_box=[[0.0, 1.0], [2.0, 1.0]])
    with pytest.raises(PropertyFormatError, match=r"y0_positive.*input_box\[1\]"):
        parse_suite(doc)


def test_unknown_condition_kind():
    doc = one_bound_doc(condition={"kind": "robustness", "epsilon": 0.1})
    with pytest.raises(PropertyFormatError, match="unknown condition kind"):
        parse_suite(doc)


def test_duplicate_names_rejected():
    doc = one_bound_doc()
    doc["properties"].append(dict(doc["properties"][0]))
    with pytest.raises(PropertyFormatError, match="duplicate"):
        parse_suite(doc)


def test_output_index_checked_against_network():
    doc = one_bound_doc(condition={"kind": "output_bound", "output_index": 4, "required": [0, 1]})
    parse_suite(doc)
    with pytest.raises(PropertyFormatError, match="output_index"):
        parse_suite(doc, output_dim=3)


def test_unsafe_set_must_leave_a_safe_action():
    doc = one_bound_doc(condition={"kind": "action_not_selected", "unsafe_actions": [0, 1]})
    with pytest.raises(PropertyFormatError, match="no safe action"):
        parse_suite(doc, output_dim=2)
    with pytest.raises(ValueError):
        ActionNotSelected(frozenset())


def test_check_network_dimension_mismatch():
    p = SafetyProperty("p", Box([0.0], [1.0]), ActionNotSelected({0}))
    net = random_network([2, 4, 3], np.random.default_rng(0))
    with pytest.raises(PropertyFormatError, match="dims"):
        p.check_network(net)


def test_is_violated_uses_argmax():
    p = SafetyProperty("p", Box([0.0], [1.0]), ActionNotSelected({1}))
    outs = np.array([[0.1, 0.9, 0.3], [0.5, 0.5, 0.0], [0.0, 1.0, 1.0]])
    assert p.is_violated(outs).tolist() == [True, False, True]


def test_round_trip(tmp_path):
    suite = default_suite(EnvConfig())
    path = tmp_path / "suite.json"
    save_suite(suite, path)
    back = load_suite(path, output_dim=27)
    assert suite_to_dict(back) == suite_to_dict(suite)
    assert back.groups == suite.groups
    assert back.offset == suite.offset and back.scale == suite.scale


# -- default suite ----------------------------------------------------------------

@pytest.fixture(scope="module")
def suite():
    return default_suite(EnvConfig())


def test_default_suite_has_eleven_rows(suite):
    assert len(suite) == 11
    approach = [p for p in suite if p.input_box.lo[0] == 0]
    retract = [p for p in suite if p.input_box.lo[0] == 1]
    assert len(approach) == 5 and len(retract) == 6
    assert "theta_2R" not in suite.names


def test_theta_1L_forbids_negative_x(suite):
    p = suite["theta_1L"]
    assert p.description == "Lower limit on x-direction (approach)"
    assert sorted(p.condition.unsafe) == [a for a in range(27) if ACTIONS[a][0] == -1]
    assert len(p.condition.unsafe) == 9


def test_theta_6R_forbids_positive_z(suite):
    p = suite["theta_6R"]
    assert p.input_box.lo[0] == 1 and p.input_box.hi[0] == 1
    assert sorted(p.condition.unsafe) == [a for a in range(27) if ACTIONS[a][2] == 1]


def test_unsafe_sets_depend_only_on_one_axis(suite):
    for p in suite:
        unsafe = p.condition.unsafe
        axes = set()
        for a in range(27):
            for b in range(27):
                diff = np.flatnonzero(ACTIONS[a] != ACTIONS[b])
                if len(diff) == 1 and (a in unsafe) != (b in unsafe):
                    axes.add(int(diff[0]))
        assert len(axes) == 1, p.name


def test_bands_sit_at_faces(suite):
    cfg = EnvConfig()
    extent = cfg.bbox_hi - cfg.bbox_lo
    for p in suite:
        narrow = np.flatnonzero(p.input_box.widths[1:4] < extent)
        assert len(narrow) == 1, p.name
        axis = int(narrow[0])
        assert p.input_box.widths[1 + axis] == pytest.approx(0.1 * extent[axis])
        lower = p.input_box.lo[1 + axis] == cfg.bbox_lo[axis]
        upper = p.input_box.hi[1 + axis] == cfg.bbox_hi[axis]
        assert lower != upper


def test_distance_range_encloses_band_points(suite):
    cfg = EnvConfig()
    rng = np.random.default_rng(0)
    for p in suite:
        g = int(p.input_box.lo[0])
        pts = rng.uniform(p.input_box.lo[1:4], p.input_box.hi[1:4], size=(2000, 3))
        d = np.linalg.norm(pts - cfg.goal(g), axis=1)
        assert np.all(d >= p.input_box.lo[7] - 1e-12) and np.all(d <= p.input_box.hi[7] + 1e-12)


def test_normalized_suite_matches_observation_scaling(suite):
    from saferetract.environment import observation_array

    cfg = EnvConfig()
    norm = suite.normalized()
    for p, q in zip(suite, norm):
        g = int(p.input_box.lo[0])
        corner = p.input_box.lo[1:4]
        obs = observation_array(np.array([g]), corner[None, :], cfg)[0]
        np.testing.assert_allclose(obs[1:7], q.input_box.lo[1:7], atol=1e-12)


def test_physical_suite_needs_normalization():
    p = SafetyProperty("p", Box([0.0], [1.0]), ActionNotSelected({0}))
    with pytest.raises(PropertyFormatError):
        PropertySuite((p,), units="physical")
