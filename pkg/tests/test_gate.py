import numpy as np
import pytest

from graphground.gate import (GateDecision, TieBreakRequest, build_tie_break, parse_choice, resolve,
                              should_gate, tie_break)
from graphground.ingest import project_points
from graphground.matcher import Grounding
from graphground.providers import MockChat
from graphground.render import auto_camera, project_box, render_candidates
from graphground.scene import Mapping, QueryEdge, QueryGraph, QueryNode

from conftest import make_obj, make_scene


def ranked(*pairs):
    return [Grounding(oid, Mapping(((0, oid),), 2, total=t)) for oid, t in pairs]


def chair_table():
    return QueryGraph((QueryNode("chair"), QueryNode("table")), (QueryEdge(0, 1, "near"),), "chair near the table")


@pytest.fixture
def two_chairs():
    # chairs 0.8 m apart (centroids), both near the table
    objs = [make_obj(0, "chair", [0, 0, 0], [0.5, 0.5, 1], n=200), make_obj(1, "chair", [0.8, 0, 0], [1.3, 0.5, 1], n=200),
            make_obj(2, "table", [0, 1, 0], [1.3, 2, 0.75], n=200)]
    return make_scene(objs, [(0, 2, "near"), (1, 2, "near")])


def test_single_node_query_fires():
    gq = QueryGraph((QueryNode("chair"),), (), "chair")
    d = should_gate(ranked((3, 0.9), (4, 0.5)), gq, None)
    assert d.fire and d.reason == "no_landmarks"


def test_room_only_fires(two_chairs):
    gq = QueryGraph((QueryNode("chair"), QueryNode("wall")), (QueryEdge(0, 1, "near"),), "")
    assert should_gate(ranked((0, 0.9), (1, 0.2)), gq, two_chairs).reason == "room_only"


def test_wide_margin_does_not_fire(two_chairs):
    d = should_gate(ranked((0, 0.9), (1, 0.7)), chair_table(), two_chairs)
    assert not d.fire and d.reason == "none"


def test_close_candidates_fire(two_chairs):
    d = should_gate(ranked((0, 0.90), (1, 0.89)), chair_table(), two_chairs)
    assert d.fire and d.reason == "close_candidates_neighbor_overlap" and d.candidates == (0, 1)


def test_close_scores_without_shared_neighbor(two_chairs):
    g = two_chairs.with_edges([])
    assert not should_gate(ranked((0, 0.90), (1, 0.89)), chair_table(), g).fire


def test_close_scores_but_far_apart():
    objs = [make_obj(0, "chair", [0, 0, 0], [0.5, 0.5, 1]), make_obj(1, "chair", [3, 0, 0], [3.5, 0.5, 1]),
            make_obj(2, "table", [1, 1, 0], [2, 2, 1])]
    g = make_scene(objs, [(0, 2, "near"), (1, 2, "near")])
    assert not should_gate(ranked((0, 0.90), (1, 0.89)), chair_table(), g).fire


def test_decision_validation():
    with pytest.raises(ValueError):
        GateDecision(True, "none", (1,))
    with pytest.raises(ValueError):
        GateDecision(False, "bogus")


def test_parse_choice():
    mm = {1: 7, 2: 9}
    assert parse_choice("2", mm) == (True, 9)
    assert parse_choice(" [1] ", mm) == (True, 7)
    assert parse_choice("NONE", mm) == (True, None)
    assert parse_choice("I think it is 2", mm) == (False, None)
    assert parse_choice("5", mm) == (False, None)


def _req():
    return TieBreakRequest(np.zeros((4, 4, 3), np.uint8), "[1] chair\n[2] chair", {1: 7, 2: 9})


def test_tie_break_replies():
    assert tie_break(_req(), MockChat(script=["2"])) == 9
    assert tie_break(_req(), MockChat(script=["NONE"])) is None
    chat = MockChat(script=["well, hmm", "it's the left one"])
    assert tie_break(_req(), chat) is None and len(chat.prompts) == 2
    assert tie_break(_req(), MockChat(script=["unsure", "1"])) == 7


def test_request_must_describe_every_marker():
    with pytest.raises(ValueError, match="marker 3"):
        TieBreakRequest(np.zeros((1, 1, 3)), "[1] chair", {1: 7, 3: 8})


def test_resolve():
    r = ranked((4, 0.9), (5, 0.88))
    assert resolve(r, GateDecision(False, "none"), None) == (4, "graph")
    fired = GateDecision(True, "close_candidates_neighbor_overlap", (4, 5))
    assert resolve(r, fired, 5) == (5, "vlm")
    assert resolve(r, fired, None) == (4, "graph")


def test_build_tie_break_prompt(two_chairs):
    req = build_tie_break(two_chairs, chair_table(), [0, 1])
    assert req.marker_map == {1: 0, 2: 1}
    assert "chair near the table" in req.text and "[1] chair" in req.text
    assert req.image.shape == (240, 320, 3)


def _inside(uv, cam):
    return np.all(uv >= 0) and np.all(uv[:, 0] < cam.width) and np.all(uv[:, 1] < cam.height)


def test_auto_camera_frames_candidates(two_chairs):
    one = auto_camera([two_chairs.nodes[0].aabb])
    assert _inside(project_box(two_chairs.nodes[0].aabb, one), one)
    far = make_obj(5, "chair", [2.8, 0, 0], [3.3, 0.5, 1])
    boxes = [two_chairs.nodes[0].aabb, far.aabb]
    cam = auto_camera(boxes)
    assert all(_inside(project_box(b, cam), cam) for b in boxes)


def test_render_culls_points_behind_camera():
    # the auto camera sits on the (1, -1, 1) diagonal looking back at the target
    behind = make_obj(0, "wall", [20, -21, 20], [21, -20, 21], n=500)
    target = make_obj(1, "chair", [0, 0, 0], [0.5, 0.5, 1], n=500)
    g = make_scene([behind, target])
    cam = auto_camera([target.aabb])
    _, z = project_points(behind.points, cam.intrinsics, cam.pose)
    assert np.all(z < 0)
    clean = render_candidates(make_scene([target]), [1], cam)
    assert np.array_equal(render_candidates(g, [1], cam), clean)
