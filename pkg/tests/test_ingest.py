import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from graphground.ingest import (Detection, FrameRecord, LoadError, backproject_mask, dump_scene_text, load_frame,
                                load_scene_graph, parse_frame, project_points, read_depth, rle_decode, rle_encode,
                                save_scene_graph, scene_from_dict, write_depth_pgm)
from graphground.render import look_at
from graphground.scene import SceneGraph3D

from conftest import make_obj, make_scene

W, H = 8, 6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=W * H, max_size=W * H))
def test_rle_round_trip(bits):
    mask = np.array(bits).reshape(H, W)
    runs = rle_encode(mask)
    assert sum(runs) == W * H
    assert np.array_equal(rle_decode(runs, W, H), mask)


def test_rle_starts_with_background():
    mask = np.zeros((1, 4), bool)
    mask[0, 0] = True
    assert rle_encode(mask) == [0, 1, 3]


def test_rle_length_mismatch():
    with pytest.raises(LoadError, match="rle length mismatch"):
        rle_decode([3, 4], W, H)


def test_depth_pgm_and_png_round_trip(tmp_path):
    d = (np.arange(W * H, dtype=np.uint16).reshape(H, W) * 997) % 65535
    write_depth_pgm(str(tmp_path / "d.pgm"), d)
    assert np.array_equal(read_depth(str(tmp_path / "d.pgm")), d)
    Image.fromarray(d).save(tmp_path / "d.png")
    assert np.array_equal(read_depth(str(tmp_path / "d.png")), d)


def _frame_doc(depth="d.pgm", **overrides):
    mask = np.zeros((H, W), bool)
    mask[2:4, 3:5] = True
    doc = {"frame_id": 3, "intrinsics": {"fx": 10, "fy": 10, "cx": 4, "cy": 3}, "pose": np.eye(4).ravel().tolist(),
           "depth": depth, "width": W, "height": H,
           "detections": [{"marker": 1, "label": "Chair", "confidence": 0.9, "rle": rle_encode(mask)}]}
    doc.update(overrides)
    return doc


@pytest.fixture
def frame_dir(tmp_path):
    write_depth_pgm(str(tmp_path / "d.pgm"), np.full((H, W), 1500, np.uint16))
    return tmp_path


def test_minimal_frame(frame_dir):
    f = parse_frame(_frame_doc(), str(frame_dir))
    assert len(f.detections) == 1 and f.detections[0].label == "chair"
    assert f.detections[0].mask.sum() == 4


def test_missing_depth(frame_dir):
    with pytest.raises(LoadError, match="depth not found"):
        parse_frame(_frame_doc(depth="nope.pgm"), str(frame_dir))


@pytest.mark.parametrize("field,value,msg", [
    ("pose", (np.eye(4) * 2).ravel().tolist(), "orthonormal"),
    ("pose", [1, 2, 3], "16 floats"),
    ("pose_convention", "world_to_camera", "pose_convention"),
    ("intrinsics", {"fx": 1}, "intrinsics"),
])
def test_frame_field_errors(frame_dir, field, value, msg):
    with pytest.raises(LoadError, match=msg):
        parse_frame(_frame_doc(**{field: value}), str(frame_dir))


def test_missing_field_is_named(frame_dir):
    doc = _frame_doc()
    del doc["width"]
    with pytest.raises(LoadError, match="width"):
        parse_frame(doc, str(frame_dir))


def test_duplicate_marker_and_confidence_floor(frame_dir):
    doc = _frame_doc()
    doc["detections"].append(dict(doc["detections"][0]))
    with pytest.raises(LoadError, match="duplicate marker"):
        parse_frame(doc, str(frame_dir))
    doc = _frame_doc()
    doc["detections"][0]["confidence"] = 0.1
    assert parse_frame(doc, str(frame_dir)).detections == ()


def test_load_frame_from_disk(frame_dir):
    (frame_dir / "f.json").write_text(json.dumps(_frame_doc()))
    f = load_frame(str(frame_dir / "f.json"))
    assert f.depth.shape == (H, W)


def _single_pixel_frame(u, v, depth_mm, pose=None, intr=(500.0, 500.0, 320.0, 240.0)):
    w, h = 640, 480
    depth = np.zeros((h, w), np.uint16)
    depth[v, u] = depth_mm
    mask = np.zeros((h, w), bool)
    mask[v, u] = True
    det = Detection(1, "x", 1.0, (), None, mask)
    return FrameRecord(0, intr, np.eye(4) if pose is None else pose, "", w, h, (det,), depth), det


def test_backproject_principal_point():
    f, d = _single_pixel_frame(320, 240, 1500)
    assert np.allclose(backproject_mask(f, d), [[0, 0, 1.5]])


def test_backproject_one_focal_length_right():
    f, d = _single_pixel_frame(520, 240, 1000, intr=(200.0, 200.0, 320.0, 240.0))
    pts = backproject_mask(f, d)
    assert np.allclose(pts, [[1, 0, 1]])
    uv, z = project_points(pts, f.intrinsics, f.pose)
    assert np.allclose(uv, [[520, 240]]) and np.allclose(z, [1.0])


def test_planar_depth_full_mask():
    w, h = 64, 48
    depth = np.full((h, w), 2000, np.uint16)
    mask = np.ones((h, w), bool)
    f = FrameRecord(0, (50.0, 50.0, 32.0, 24.0), np.eye(4), "", w, h, (Detection(1, "wall", 1, (), None, mask),), depth)
    pts = backproject_mask(f, f.detections[0])
    assert len(pts) == w * h
    assert np.all(np.abs(pts[:, 2] - 2.0) <= 1e-6)


def test_invalid_depth_pixels_are_skipped():
    f, d = _single_pixel_frame(10, 10, 0)
    assert backproject_mask(f, d).shape == (0, 3)


def test_reprojection_with_rotated_pose():
    rng = np.random.default_rng(1)
    pose = look_at([1.0, -2.0, 1.5], [0.3, 0.4, 0.2])
    w, h = 640, 480
    intr = (520.0, 515.0, 319.5, 239.5)
    us, vs = rng.integers(0, w, 500), rng.integers(0, h, 500)
    depth = np.zeros((h, w), np.uint16)
    depth[vs, us] = rng.integers(300, 8000, 500)
    mask = depth > 0
    f = FrameRecord(0, intr, pose, "", w, h, (Detection(1, "x", 1, (), None, mask),), depth)
    pts = backproject_mask(f, f.detections[0])
    uv, z = project_points(pts, intr, pose)
    v, u = np.nonzero(mask)
    assert np.max(np.abs(uv - np.stack([u, v], 1))) < 1e-6
    assert np.allclose(z, depth[v, u] / 1000.0)


def test_scene_round_trip(tmp_path):
    empty = SceneGraph3D({}, ())
    save_scene_graph(empty, str(tmp_path / "e.json"))
    assert len(load_scene_graph(str(tmp_path / "e.json")).nodes) == 0

    g = make_scene([make_obj(0, "chair", [0, 0, 0], [1, 1, 1], n=5), make_obj(1, "table", [2, 0, 0], [3, 1, 1], n=5),
                    make_obj(4, "lamp", [0, 2, 0], [1, 3, 1], n=5)],
                   [(0, 1, "left of"), (4, 0, "near", 2, "geometric")])
    path = str(tmp_path / "g.json")
    save_scene_graph(g, path)
    g2 = load_scene_graph(path)
    assert dump_scene_text(g2) == dump_scene_text(g)
    assert [e.count for e in g2.edges] == [1, 2]
    assert np.array_equal(g2.nodes[4].points, g.nodes[4].points)


def test_unsupported_version():
    with pytest.raises(LoadError, match="unsupported version"):
        scene_from_dict({"header": {"version": 99}, "nodes": [], "edges": []})
