import numpy as np
import pytest

from graphground.evalharness.metrics import evaluate, metrics_csv, metrics_table
from graphground.evalharness.oracle import brute_force_ground
from graphground.evalharness.synthetic import (InfeasibleSpec, SynthSpec, build_scene_graph, denoise_scene,
                                               disambiguating_constraints, gen_distractor_instance, gen_synthetic,
                                               inject_noise)
from graphground.ingest import dump_scene_text
from graphground.reconstruct import AssociationConfig
from graphground.relations import converse
from graphground.scene import AABB, QueryGraph, QueryNode, aabb_iou

from conftest import make_obj, make_scene


def holds(g, oid, pred, landmark_label):
    """Independent check over the raw edge list."""
    for e in g.edges:
        fwd = e.src_id == oid and e.predicate == pred and g.nodes[e.dst_id].label == landmark_label
        back = e.dst_id == oid and converse(e.predicate) == pred and g.nodes[e.src_id].label == landmark_label
        if fwd or back:
            return True
    return False


def test_single_object():
    s = gen_synthetic(0, SynthSpec(n_objects=1, n_duplicate_groups=0))
    assert len(s.graph.nodes) == 1
    assert [q.split for q in s.queries] == ["unique"]


def test_three_chairs_and_a_table():
    placed = [("chair", AABB([1, 1, 0], [1.5, 1.5, 0.9])), ("chair", AABB([4, 1, 0], [4.5, 1.5, 0.9])),
              ("chair", AABB([7, 1, 0], [7.5, 1.5, 0.9])), ("table", AABB([1.8, 1, 0], [3, 1.8, 0.75]))]
    g = build_scene_graph(placed, [2, 0, 1, 3], SynthSpec())
    found = disambiguating_constraints(g, 2)
    assert found and [o for o in g.by_label("chair") if all(holds(g, o, p, l) for p, l in found)] == [2]
    sat = [o for o in g.by_label("chair") if holds(g, o, "left of", "table")]
    assert sat == [2]


@pytest.mark.parametrize("seed", range(20))
def test_queries_identify_unique_target(seed):
    s = gen_synthetic(seed)
    for q in s.queries:
        label = q.graph.target.label
        constraints = [(e.predicate, q.graph.nodes[e.dst].label) for e in q.graph.edges]
        sat = [o for o in s.graph.by_label(label) if all(holds(s.graph, o, p, l) for p, l in constraints)]
        assert sat == [q.gt_id], q.text
        assert q.split == ("unique" if len(s.graph.by_label(label)) == 1 else "multiple")


def test_boxes_do_not_overlap_and_fit_room():
    s = gen_synthetic(4, SynthSpec(n_objects=12))
    boxes = [n.aabb for n in s.graph.nodes.values()]
    for b in boxes:
        assert np.all(b.lo >= -1e-9) and np.all(b.hi <= np.array([10, 10, 3]) + 1e-9)
    for i, a in enumerate(boxes):
        for b in boxes[i + 1:]:
            inter = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
            assert np.any(inter <= 1e-9)


def test_determinism():
    a, b = gen_synthetic(9), gen_synthetic(9)
    assert dump_scene_text(a.graph) == dump_scene_text(b.graph)
    assert [q.record() for q in a.queries] == [q.record() for q in b.queries]


def test_infeasible_specs():
    with pytest.raises(InfeasibleSpec):
        gen_synthetic(0, SynthSpec(n_objects=60))
    with pytest.raises(InfeasibleSpec):
        gen_synthetic(0, SynthSpec(n_objects=0))


def test_distractor_instance_shape():
    s, q = gen_distractor_instance(3, 4)
    assert len(s.graph.by_label(q.graph.target.label)) == 4
    assert len(q.graph.edges) == 1 and q.split == "multiple"


def test_noise_then_denoise():
    s = gen_synthetic(2)
    noisy = inject_noise(s.graph, 2)
    assert len(noisy.nodes) == len(s.graph.nodes) + 3
    clean = denoise_scene(noisy, AssociationConfig(dbscan_eps=0.1, dbscan_min_pts=10, min_points=50))
    assert set(clean.nodes) == set(s.graph.nodes)
    for oid, obj in s.graph.nodes.items():
        assert aabb_iou(clean.nodes[oid].aabb, obj.aabb) >= 0.5
        assert aabb_iou(noisy.nodes[oid].aabb, obj.aabb) < aabb_iou(clean.nodes[oid].aabb, obj.aabb)


def test_oracle_single_node(emb):
    objs = [make_obj(i, l, [i, 0, 0], [i + 1, 1, 1]) for i, l in enumerate(["chair", "couch", "sofa"])]
    g = make_scene(objs)
    gq = QueryGraph((QueryNode("sofa"),), (), "sofa")
    t, total, assign = brute_force_ground(gq, g, emb, [[0, 1, 2]])
    assert t == 2 and assign == {0: 2} and total == pytest.approx(0.4 + 0.2 + 0.1)


def test_oracle_guard(emb):
    objs = [make_obj(i, "chair", [i, 0, 0], [i + 1, 1, 1]) for i in range(40)]
    g = make_scene(objs)
    gq = QueryGraph(tuple(QueryNode("chair") for _ in range(5)), (), "")
    with pytest.raises(ValueError, match="instance too large for oracle"):
        brute_force_ground(gq, g, emb, [list(range(40))] * 5)


GT = AABB([0, 0, 0], [1, 1, 1]).to_list()


def res(qid, box, path="graph", oid=0):
    return {"query_id": qid, "predicted_object_id": oid, "predicted_aabb": box, "path": path}


def test_metrics_boundaries():
    quarter = AABB([0, 0, 0], [0.25, 1, 1]).to_list()
    m = evaluate([res("a", GT), res("b", quarter, "vlm")],
                 [{"query_id": "a", "gt_aabb": GT, "split": "unique"},
                  {"query_id": "b", "gt_aabb": GT, "split": "multiple"}])
    assert m["n"] == 2 and m["acc"] == {"t10": 1.0, "t25": 1.0, "t50": 0.5}
    assert m["by_path"]["vlm"]["acc"]["t25"] == 1.0 and m["by_path"]["vlm"]["acc"]["t50"] == 0.0
    assert "acc@0.25" in metrics_table(m) and metrics_csv(m).startswith("group,n,")


def test_metrics_empty_and_unevaluable():
    m = evaluate([], [])
    assert m["n"] == 0 and m["acc"] == {"t10": 0.0, "t25": 0.0, "t50": 0.0}
    m = evaluate([res("a", GT), res("z", GT)], [{"query_id": "a", "gt_id": 0}, {"query_id": "x", "gt_aabb": GT}])
    assert m["n"] == 1 and m["unevaluable"] == 1


def test_metrics_errors_count_as_misses():
    m = evaluate([{"query_id": "a", "error": "boom"}], [{"query_id": "a", "gt_aabb": GT, "split": "unique"}])
    assert m["n"] == 1 and m["acc"]["t10"] == 0.0


def test_metrics_nesting_and_weighted_mean():
    rng = np.random.default_rng(0)
    results, gt = [], []
    for i in range(200):
        lo = rng.uniform(-0.8, 0.8, 3)
        results.append(res(f"q{i}", AABB(lo, lo + rng.uniform(0.5, 1.5, 3)).to_list()))
        gt.append({"query_id": f"q{i}", "gt_aabb": GT, "split": "unique" if i % 3 else "multiple"})
    m = evaluate(results, gt)
    a = m["acc"]
    assert a["t50"] <= a["t25"] <= a["t10"]
    for k in a:
        mean = sum(s["n"] * s["acc"][k] for s in m["by_split"].values()) / m["n"]
        assert mean == pytest.approx(a[k])
