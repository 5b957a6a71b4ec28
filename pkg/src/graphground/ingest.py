"""On-disk formats: frame records, depth images, RLE masks and scene-graph files.

Conventions (fixed here, not negotiable per file):

* depth is 16-bit, millimeters, ``0`` marks an invalid pixel;
* ``pose`` is the 4x4 camera-to-world matrix, row-major, camera optical
  frame (+x right, +y down, +z forward);
* masks are run-length encoded over row-major pixels, runs alternating
  background/foreground and starting with background.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .scene import AABB, ObjectInstance, RelationEdge, SceneGraph3D

SCENE_FORMAT_VERSION = 1
POSE_CONVENTION = "camera_to_world"
DEFAULT_CONFIDENCE_FLOOR = 0.2


class LoadError(ValueError):
    pass


# --- masks -----------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> List[int]:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], width: int, height: int) -> np.ndarray:
    total = int(sum(runs))
    if total != width * height:
        raise LoadError(f"rle length mismatch: runs cover {total} pixels, image has {width * height}")
    if any(r < 0 for r in runs):
        raise LoadError("rle contains a negative run")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, np.asarray(runs, dtype=np.int64)).reshape(height, width)


# --- depth -----------------------------------------------------------------

def write_depth_pgm(path: str, depth_mm: np.ndarray) -> None:
    d = np.asarray(depth_mm)
    if d.ndim != 2:
        raise ValueError("depth must be a 2D array")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.clip(d, 0, 65535).astype(">u2").tobytes())


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5":
        raise LoadError(f"depth: {path} is not a binary PGM")
    if maxval < 256:
        arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    else:
        arr = np.frombuffer(data, dtype=">u2", count=w * h, offset=pos)
    return arr.reshape(h, w).astype(np.uint16)


def read_depth(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise LoadError(f"depth not found: {path}")
    try:
        if path.lower().endswith((".pgm", ".pnm")):
            return _read_pgm(path)
        from PIL import Image

        with Image.open(path) as img:
            arr = np.array(img)
        if arr.ndim != 2:
            raise LoadError(f"depth: {path} is not single-channel")
        return arr.astype(np.uint16)
    except LoadError:
        raise
    except Exception as exc:  # decoder errors come in many types
        raise LoadError(f"depth: cannot decode {path}: {exc}") from exc


# --- frames ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Detection:
    marker: int
    label: str
    confidence: float
    mask_rle: Tuple[int, ...]
    caption: Optional[str] = None
    mask: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class FrameRecord:
    frame_id: int
    intrinsics: Tuple[float, float, float, float]
    pose: np.ndarray
    depth_path: str
    width: int
    height: int
    detections: Tuple[Detection, ...]
    depth: Optional[np.ndarray] = field(default=None, repr=False)
    rgb_path: Optional[str] = None

    def detection(self, marker: int) -> Optional[Detection]:
        for d in self.detections:
            if d.marker == marker:
                return d
        return None

    @property
    def markers(self) -> List[int]:
        return [d.marker for d in self.detections]


def _require(obj: dict, key: str, where: str = "frame"):
    if key not in obj:
        raise LoadError(f"{where}: missing field '{key}'")
    return obj[key]


def _validate_pose(pose) -> np.ndarray:
    try:
        m = np.asarray(pose, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise LoadError(f"pose: not numeric: {exc}") from exc
    if m.size != 16:
        raise LoadError(f"pose: expected 16 floats, got {m.size}")
    m = m.reshape(4, 4)
    rot = m[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-4) or np.linalg.det(rot) < 0:
        raise LoadError("pose: rotation block is not orthonormal")
    if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
        raise LoadError("pose: last row must be [0, 0, 0, 1]")
    return m


def parse_frame(doc: dict, base_dir: str = ".", confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
                load_depth: bool = True) -> FrameRecord:
    conv = doc.get("pose_convention", POSE_CONVENTION)
    if conv != POSE_CONVENTION:
        raise LoadError(f"pose_convention: only '{POSE_CONVENTION}' is supported, got {conv!r}")
    frame_id = int(_require(doc, "frame_id"))
    intr = _require(doc, "intrinsics")
    try:
        fx, fy, cx, cy = (float(intr[k]) for k in ("fx", "fy", "cx", "cy"))
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"intrinsics: expected numeric fx, fy, cx, cy ({exc})") from exc
    if fx <= 0 or fy <= 0:
        raise LoadError("intrinsics: fx and fy must be positive")
    pose = _validate_pose(_require(doc, "pose"))
    width, height = int(_require(doc, "width")), int(_require(doc, "height"))
    if width <= 0 or height <= 0:
        raise LoadError("width/height: must be positive")
    depth_rel = _require(doc, "depth")
    depth_path = depth_rel if os.path.isabs(depth_rel) else os.path.join(base_dir, depth_rel)
    depth = None
    if load_depth:
        depth = read_depth(depth_path)
        if depth.shape != (height, width):
            raise LoadError(f"depth: shape {depth.shape[::-1]} does not match frame {width}x{height}")

    dets = []
    seen = set()
    raw_dets = _require(doc, "detections")
    if not isinstance(raw_dets, list):
        raise LoadError("detections: expected a list")
    for i, d in enumerate(raw_dets):
        where = f"detections[{i}]"
        marker = int(_require(d, "marker", where))
        if marker < 1:
            raise LoadError(f"{where}.marker: must be a positive integer")
        if marker in seen:
            raise LoadError(f"{where}.marker: duplicate marker {marker}")
        seen.add(marker)
        conf = float(_require(d, "confidence", where))
        if not 0.0 <= conf <= 1.0:
            raise LoadError(f"{where}.confidence: must lie in [0, 1]")
        runs = tuple(int(r) for r in _require(d, "rle", where))
        try:
            mask = rle_decode(runs, width, height)
        except LoadError as exc:
            raise LoadError(f"{where}.rle: {exc}") from exc
        label = str(_require(d, "label", where)).strip().lower()
        if conf < confidence_floor:
            continue
        dets.append(Detection(marker, label, conf, runs, d.get("caption"), mask))
    rgb = doc.get("rgb")
    if rgb is not None and not os.path.isabs(rgb):
        rgb = os.path.join(base_dir, rgb)
    return FrameRecord(frame_id, (fx, fy, cx, cy), pose, depth_path, width, height, tuple(dets), depth, rgb)


def load_frame(path: str, confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR) -> FrameRecord:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise LoadError(f"frame not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"frame: {path} is not valid JSON: {exc}") from exc
    return parse_frame(doc, os.path.dirname(os.path.abspath(path)), confidence_floor)


def frame_to_dict(frame: FrameRecord, depth_ref: Optional[str] = None) -> dict:
    fx, fy, cx, cy = frame.intrinsics
    doc = {
        "frame_id": frame.frame_id,
        "pose_convention": POSE_CONVENTION,
        "intrinsics": {"fx": fx, "fy": fy, "cx": cx, "cy": cy},
        "pose": [float(x) for x in np.asarray(frame.pose).reshape(-1)],
        "depth": depth_ref or frame.depth_path,
        "width": frame.width,
        "height": frame.height,
        "detections": [],
    }
    for d in frame.detections:
        entry = {"marker": d.marker, "label": d.label, "confidence": d.confidence, "rle": list(d.mask_rle)}
        if d.caption is not None:
            entry["caption"] = d.caption
        doc["detections"].append(entry)
    if frame.rgb_path:
        doc["rgb"] = frame.rgb_path
    return doc


# --- back-projection -------------------------------------------------------

def backproject_mask(frame: FrameRecord, det: Detection) -> np.ndarray:
    """World-frame points for every mask pixel with valid depth, shape (N, 3)."""
    if frame.depth is None:
        raise ValueError(f"frame {frame.frame_id}: depth not loaded")
    mask = det.mask if det.mask is not None else rle_decode(det.mask_rle, frame.width, frame.height)
    v, u = np.nonzero(mask & (frame.depth > 0))
    if len(u) == 0:
        return np.empty((0, 3))
    z = frame.depth[v, u].astype(np.float64) / 1000.0
    fx, fy, cx, cy = frame.intrinsics
    cam = np.stack([(u - cx) * z / fx, (v - cy) * z / fy, z], axis=1)
    rot, t = frame.pose[:3, :3], frame.pose[:3, 3]
    return cam @ rot.T + t


def project_points(points: np.ndarray, intrinsics, pose: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of world points; returns (pixels (N,2) as (u,v), camera depth z)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot, t = pose[:3, :3], pose[:3, 3]
    cam = (pts - t) @ rot
    fx, fy, cx, cy = intrinsics
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cam[:, 0] / z + cx
        v = fy * cam[:, 1] / z + cy
    return np.stack([u, v], axis=1), z


# --- scene graph persistence -----------------------------------------------

def scene_to_dict(g: SceneGraph3D, include_points: bool = True, meta: Optional[dict] = None) -> dict:
    header = {"version": SCENE_FORMAT_VERSION, "embedding_dim": g.embedding_dim}
    if meta:
        header.update(meta)
    nodes = []
    for oid, n in g.nodes.items():
        entry = {
            "id": oid,
            "label": n.label,
            "aabb": {"min": n.aabb.lo.tolist(), "max": n.aabb.hi.tolist()},
            "embedding": n.embedding.tolist(),
            "captions": list(n.captions),
            "num_observations": n.num_observations,
        }
        if include_points:
            entry["points"] = n.points.reshape(-1).tolist()
        nodes.append(entry)
    edges = [
        {"src": e.src_id, "dst": e.dst_id, "predicate": e.predicate, "count": e.count, "provenance": e.provenance}
        for e in g.edges
    ]
    return {"header": header, "nodes": nodes, "edges": edges}


def dump_scene_text(g: SceneGraph3D, include_points: bool = True, meta: Optional[dict] = None) -> str:
    return json.dumps(scene_to_dict(g, include_points, meta), sort_keys=True, separators=(",", ":")) + "\n"


def save_scene_graph(g: SceneGraph3D, path: str, include_points: bool = True, meta: Optional[dict] = None) -> None:
    text = dump_scene_text(g, include_points, meta)
    with open(path, "w") as fh:
        fh.write(text)


def scene_from_dict(doc: dict) -> Tuple[SceneGraph3D, dict]:
    header = doc.get("header")
    if not isinstance(header, dict):
        raise LoadError("scene graph: missing header")
    if header.get("version") != SCENE_FORMAT_VERSION:
        raise LoadError(f"unsupported version: {header.get('version')!r}")
    dim = header.get("embedding_dim")
    nodes = {}
    for n in doc.get("nodes", []):
        emb = np.asarray(n["embedding"], dtype=np.float64)
        if dim is not None and emb.shape[0] != dim:
            raise LoadError(f"node {n['id']}: embedding dimension {emb.shape[0]} != header {dim}")
        pts = np.asarray(n.get("points", []), dtype=np.float64).reshape(-1, 3)
        box = AABB(n["aabb"]["min"], n["aabb"]["max"])
        nodes[int(n["id"])] = ObjectInstance(int(n["id"]), n["label"], pts, box, emb,
                                             tuple(n.get("captions", [])), int(n.get("num_observations", 1)))
    edges = [RelationEdge(int(e["src"]), int(e["dst"]), e["predicate"], int(e.get("count", 1)),
                          e.get("provenance", "vlm")) for e in doc.get("edges", [])]
    try:
        g = SceneGraph3D(nodes, tuple(edges), dim)
    except ValueError as exc:
        raise LoadError(f"scene graph: {exc}") from exc
    return g, header


def load_scene_graph(path: str, with_header: bool = False):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise LoadError(f"scene graph not found: {path}") from exc
    g, header = scene_from_dict(doc)
    return (g, header) if with_header else g


def write_edges_jsonl(edges: Sequence[RelationEdge], path: str) -> None:
    with open(path, "w") as fh:
        for e in edges:
            fh.write(json.dumps({"src": e.src_id, "dst": e.dst_id, "predicate": e.predicate,
                                 "count": e.count, "provenance": e.provenance}, sort_keys=True) + "\n")
