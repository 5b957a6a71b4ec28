"""Seeded synthetic rooms with relationally disambiguated referring expressions."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..ingest import Detection, FrameRecord, rle_encode
from ..providers import MockEmbedder
from ..reconstruct import AssociationConfig, denoise
from ..relations import GeometryConfig, aggregate_edges, converse, geometric_relations
from ..render import look_at
from ..scene import AABB, ObjectInstance, QueryEdge, QueryGraph, QueryNode, SceneGraph3D, normalize

ROOM = (10.0, 10.0, 3.0)
FOOTPRINT_GAP = 0.15

# label -> (width x, depth y, height z) in meters
FLOOR_VOCAB: Dict[str, Tuple[float, float, float]] = {
    "chair": (0.5, 0.5, 0.9),
    "table": (1.2, 0.8, 0.75),
    "sofa": (2.0, 0.9, 0.8),
    "lamp": (0.4, 0.4, 1.5),
    "cabinet": (0.8, 0.5, 1.0),
    "bed": (2.0, 1.6, 0.6),
    "desk": (1.4, 0.7, 0.75),
    "bookshelf": (1.0, 0.35, 1.8),
    "trash can": (0.35, 0.35, 0.6),
    "plant": (0.4, 0.4, 0.9),
    "box": (0.5, 0.5, 0.4),
    "backpack": (0.35, 0.25, 0.45),
    "armchair": (0.8, 0.8, 0.9),
    "piano": (1.5, 0.6, 1.2),
    "dresser": (1.2, 0.5, 0.9),
    "printer": (0.5, 0.4, 0.35),
}
# objects that may sit on top of a support surface
TOP_VOCAB: Dict[str, Tuple[float, float, float]] = {
    "monitor": (0.6, 0.2, 0.4),
    "cup": (0.12, 0.12, 0.14),
    "book": (0.25, 0.18, 0.05),
    "keyboard": (0.45, 0.15, 0.04),
}
SUPPORTS = {"table", "desk", "cabinet", "dresser"}


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_objects: int = 8
    n_duplicate_groups: int = 1
    # probability that a new object is placed next to an existing one
    relation_density: float = 0.7
    group_size: Tuple[int, int] = (2, 3)
    # 0 disables small objects resting on tables and desks
    p_on_top: float = 0.15
    point_spacing: float = 0.05
    min_points: int = 200
    max_relations: int = 2


@dataclass(frozen=True)
class SynthQuery:
    query_id: str
    scene_id: str
    text: str
    graph: QueryGraph
    gt_id: int
    gt_aabb: AABB
    split: str

    def record(self) -> dict:
        return {"query_id": self.query_id, "scene_id": self.scene_id, "text": self.text,
                "gt_id": self.gt_id, "gt_aabb": self.gt_aabb.to_list(), "split": self.split}


@dataclass
class SyntheticScene:
    seed: int
    graph: SceneGraph3D
    queries: List[SynthQuery]

    @property
    def scene_id(self) -> str:
        return f"synth-{self.seed}"


def surface_points(box: AABB, spacing: float, min_points: int = 0) -> np.ndarray:
    """Regular grid on the six faces of a box."""
    size = box.size
    area = 2 * (size[0] * size[1] + size[0] * size[2] + size[1] * size[2])
    if min_points and area / spacing ** 2 < min_points:
        spacing = math.sqrt(area / min_points)
    axes = [np.linspace(box.lo[i], box.hi[i], max(2, int(math.ceil(size[i] / spacing)) + 1)) for i in range(3)]
    faces = []
    for fixed in range(3):
        a, b = [i for i in range(3) if i != fixed]
        ga, gb = np.meshgrid(axes[a], axes[b], indexing="ij")
        for value in (box.lo[fixed], box.hi[fixed]):
            pts = np.empty((ga.size, 3))
            pts[:, a], pts[:, b], pts[:, fixed] = ga.ravel(), gb.ravel(), value
            faces.append(pts)
    return np.unique(np.concatenate(faces), axis=0)


def _footprint_clear(lo, hi, placed: Sequence[AABB]) -> bool:
    for b in placed:
        if lo[0] < b.hi[0] + FOOTPRINT_GAP and b.lo[0] < hi[0] + FOOTPRINT_GAP and \
                lo[1] < b.hi[1] + FOOTPRINT_GAP and b.lo[1] < hi[1] + FOOTPRINT_GAP:
            return False
    return True


def _choose_labels(rng: np.random.Generator, spec: SynthSpec) -> List[str]:
    floor = sorted(FLOOR_VOCAB)
    labels: List[str] = []
    group_labels = list(rng.choice(floor, size=spec.n_duplicate_groups, replace=False)) if spec.n_duplicate_groups else []
    for g in group_labels:
        lo, hi = spec.group_size
        labels += [str(g)] * int(rng.integers(lo, hi + 1))
    if len(labels) > spec.n_objects:
        raise InfeasibleSpec(f"duplicate groups need {len(labels)} objects but n_objects={spec.n_objects}")
    pool = floor + (sorted(TOP_VOCAB) if spec.p_on_top > 0 else [])
    singles = [l for l in pool if l not in group_labels]
    need = spec.n_objects - len(labels)
    if need > len(singles):
        raise InfeasibleSpec(f"vocabulary has only {len(singles)} distinct labels for {need} unique objects")
    labels += [str(x) for x in rng.choice(singles, size=need, replace=False)]
    return labels


def _place(rng: np.random.Generator, labels: Sequence[str], spec: SynthSpec) -> List[Tuple[str, AABB]]:
    room = np.array(ROOM)
    placed: List[Tuple[str, AABB]] = []
    floor_boxes: List[AABB] = []
    tops: Dict[int, List[AABB]] = {}
    order = sorted(range(len(labels)), key=lambda i: (labels[i] in TOP_VOCAB, i))
    for i in order:
        label = labels[i]
        if label in TOP_VOCAB:
            size = np.array(TOP_VOCAB[label])
            supports = [k for k, (l, _) in enumerate(placed) if l in SUPPORTS]
            box = None
            for k in rng.permutation(supports) if supports else []:
                sup = placed[int(k)][1]
                room_xy = sup.size[:2] - size[:2]
                if np.any(room_xy < 0):
                    continue
                for _ in range(20):
                    xy = sup.lo[:2] + rng.random(2) * room_xy
                    lo = np.array([xy[0], xy[1], sup.hi[2]])
                    cand = AABB(lo, lo + size)
                    if _footprint_clear(cand.lo, cand.hi, tops.get(int(k), [])):
                        box = cand
                        tops.setdefault(int(k), []).append(cand)
                        break
                if box is not None:
                    break
            if box is None:
                label = str(rng.choice(sorted(l for l in FLOOR_VOCAB if l not in labels)))
            else:
                placed.append((label, box))
                continue
        size = np.array(FLOOR_VOCAB[label]) * rng.uniform(0.9, 1.1, 3)
        box = None
        for attempt in range(400):
            if floor_boxes and rng.random() < spec.relation_density:
                anchor = floor_boxes[int(rng.integers(len(floor_boxes)))]
                side = int(rng.integers(4))
                gap = rng.uniform(0.2, 0.9)
                c = anchor.center[:2].copy()
                off = (anchor.size[:2] + size[:2]) / 2 + gap
                if side < 2:
                    c[0] += off[0] if side == 0 else -off[0]
                    c[1] += rng.uniform(-0.3, 0.3)
                else:
                    c[1] += off[1] if side == 2 else -off[1]
                    c[0] += rng.uniform(-0.3, 0.3)
                lo_xy = c - size[:2] / 2
            else:
                lo_xy = rng.random(2) * (room[:2] - size[:2])
            lo = np.array([lo_xy[0], lo_xy[1], 0.0])
            hi = lo + size
            if np.any(lo < 0) or np.any(hi > room):
                continue
            if _footprint_clear(lo, hi, floor_boxes):
                box = AABB(lo, hi)
                break
        if box is None:
            raise InfeasibleSpec(f"could not place {len(labels)} objects without overlap in the room")
        floor_boxes.append(box)
        placed.append((label, box))
    return placed


def satisfies(g: SceneGraph3D, oid: int, predicate: str, landmark_label: str) -> bool:
    """Does object ``oid`` stand in ``predicate`` to some object labeled ``landmark_label``?"""
    for e in g.edges:
        if e.src_id == oid and e.predicate == predicate and g.nodes[e.dst_id].label == landmark_label:
            return True
        if e.dst_id == oid and converse(e.predicate) == predicate and g.nodes[e.src_id].label == landmark_label:
            return True
    return False


def descriptors(g: SceneGraph3D, oid: int) -> List[Tuple[str, str]]:
    """(predicate, landmark label) pairs true of ``oid``, landmark label differing from its own."""
    own = g.nodes[oid].label
    out = set()
    for e in g.edges:
        if e.src_id == oid and g.nodes[e.dst_id].label != own:
            out.add((e.predicate, g.nodes[e.dst_id].label))
        if e.dst_id == oid and converse(e.predicate) and g.nodes[e.src_id].label != own:
            out.add((converse(e.predicate), g.nodes[e.src_id].label))
    return sorted(out)


def matching_objects(g: SceneGraph3D, label: str, constraints: Sequence[Tuple[str, str]]) -> List[int]:
    return [o for o in g.by_label(label) if all(satisfies(g, o, p, l) for p, l in constraints)]


def describe(label: str, constraints: Sequence[Tuple[str, str]]) -> Tuple[str, QueryGraph]:
    text = f"the {label}"
    nodes = [QueryNode(label)]
    edges = []
    for k, (p, l) in enumerate(constraints):
        text += (" and " if k else " ") + f"{p} the {l}"
        nodes.append(QueryNode(l))
        edges.append(QueryEdge(0, len(nodes) - 1, p))
    return text, QueryGraph(tuple(nodes), tuple(edges), text)


def disambiguating_constraints(g: SceneGraph3D, oid: int, max_relations: int = 2) -> Optional[List[Tuple[str, str]]]:
    label = g.nodes[oid].label
    options = [d for d in descriptors(g, oid)]
    for r in range(1, max_relations + 1):
        for combo in itertools.combinations(options, r):
            if len({l for _, l in combo}) < r:
                continue
            if matching_objects(g, label, combo) == [oid]:
                return list(combo)
    return None


def build_scene_graph(placed: Sequence[Tuple[str, AABB]], ids: Sequence[int], spec: SynthSpec,
                      embedder=None) -> SceneGraph3D:
    embedder = embedder or MockEmbedder()
    labels = sorted({l for l, _ in placed})
    vecs = dict(zip(labels, embedder.embed_text(labels)))
    nodes = {}
    for oid, (label, box) in zip(ids, placed):
        pts = surface_points(box, spec.point_spacing, spec.min_points)
        nodes[int(oid)] = ObjectInstance(int(oid), label, pts, box, normalize(vecs[label]), (f"a {label}",), 1)
    g = SceneGraph3D(nodes, (), embedder.embed_text(["x"])[0].shape[0])
    return g.with_edges(aggregate_edges(geometric_relations(g, GeometryConfig())))


def gen_synthetic(seed: int, spec: SynthSpec = SynthSpec(), embedder=None, p_single: float = 0.5) -> SyntheticScene:
    if spec.n_objects < 1:
        raise InfeasibleSpec("n_objects must be >= 1")
    rng = np.random.default_rng(seed)
    labels = _choose_labels(rng, spec)
    placed = _place(rng, labels, spec)
    ids = rng.permutation(len(placed))
    g = build_scene_graph(placed, ids, spec, embedder)
    scene_id = f"synth-{seed}"
    queries = []
    for oid in sorted(g.nodes):
        label = g.nodes[oid].label
        split = "unique" if len(g.by_label(label)) == 1 else "multiple"
        if split == "unique":
            constraints: Optional[List[Tuple[str, str]]] = []
            opts = descriptors(g, oid)
            if opts and rng.random() >= p_single:
                constraints = [opts[int(rng.integers(len(opts)))]]
        else:
            constraints = disambiguating_constraints(g, oid, spec.max_relations)
            if constraints is None:
                continue
        text, gq = describe(label, constraints)
        queries.append(SynthQuery(f"{scene_id}-q{oid}", scene_id, text, gq, oid, g.nodes[oid].aabb, split))
    return SyntheticScene(seed, g, queries)


def gen_distractor_instance(seed: int, k: int, n_other: int = 4, max_tries: int = 200) -> Tuple[SyntheticScene, SynthQuery]:
    """Scene with exactly ``k`` same-label objects, one singled out by a single relation."""
    spec = SynthSpec(n_objects=k + n_other, n_duplicate_groups=1, group_size=(k, k), relation_density=0.9,
                     p_on_top=0.0, max_relations=1)
    for attempt in range(max_tries):
        sub = seed * 1000 + attempt
        try:
            scene = gen_synthetic(sub, spec)
        except InfeasibleSpec:
            continue
        multi = [q for q in scene.queries if q.split == "multiple" and len(q.graph.edges) == 1
                 and len(scene.graph.by_label(q.graph.target.label)) == k]
        if multi:
            rng = np.random.default_rng(sub)
            return scene, multi[int(rng.integers(len(multi)))]
    raise InfeasibleSpec(f"no disambiguable instance found for seed={seed}, k={k}")


# --- noise injection for the denoising ablation ----------------------------

def inject_noise(g: SceneGraph3D, seed: int, outlier_frac: float = 0.1, n_ghosts: int = 3,
                 spread: float = 0.5, ghost_points: int = 15) -> SceneGraph3D:
    """Scatter outliers around each object and add tiny ghost objects with borrowed labels.

    Edges are kept as they are: relation evidence comes from 2D views and is
    not affected by 3D point noise.
    """
    rng = np.random.default_rng(seed)
    nodes = {}
    for oid, obj in g.nodes.items():
        n_out = int(math.ceil(outlier_frac * len(obj.points)))
        lo, hi = obj.aabb.lo - spread, obj.aabb.hi + spread
        out = lo + rng.random((n_out, 3)) * (hi - lo)
        out[:, 2] = np.maximum(out[:, 2], 0.0)
        nodes[oid] = obj.with_points(np.concatenate([obj.points, out]))
    next_id = max(g.nodes) + 1 if g.nodes else 0
    donors = sorted(g.nodes)
    for k in range(n_ghosts if donors else 0):
        donor = g.nodes[donors[int(rng.integers(len(donors)))]]
        c = rng.random(3) * np.array(ROOM)
        pts = c + rng.uniform(-0.05, 0.05, (ghost_points, 3))
        nodes[next_id] = ObjectInstance(next_id, donor.label, pts, AABB.from_points(pts), donor.embedding,
                                        (f"a {donor.label}",), 1)
        next_id += 1
    return SceneGraph3D(nodes, g.edges, g.embedding_dim)


def denoise_scene(g: SceneGraph3D, cfg: AssociationConfig) -> SceneGraph3D:
    """Denoise every object; objects left with too few points go, with their edges."""
    nodes = {}
    for oid, obj in g.nodes.items():
        clean = denoise(obj, cfg)
        if clean is not None:
            nodes[oid] = clean
    edges = tuple(e for e in g.edges if e.src_id in nodes and e.dst_id in nodes)
    return SceneGraph3D(nodes, edges, g.embedding_dim)


# --- RGB-D frame synthesis -------------------------------------------------

@dataclass(frozen=True)
class CameraRig:
    width: int = 320
    height: int = 240
    half_fov_deg: float = 40.0
    height_m: float = 2.8
    inset: float = 0.3
    min_pixels: int = 30


def rig_poses(rig: CameraRig = CameraRig()) -> List[np.ndarray]:
    x, y, _ = ROOM
    i = rig.inset
    eyes = [(i, i), (x - i, i), (x - i, y - i), (i, y - i),
            (x / 2, i), (x - i, y / 2), (x / 2, y - i), (i, y / 2)]
    target = np.array([x / 2, y / 2, 0.4])
    return [look_at([ex, ey, rig.height_m], target) for ex, ey in eyes]


def raycast_boxes(boxes: Sequence[AABB], intrinsics, pose: np.ndarray, width: int, height: int):
    """Depth (meters along the optical axis, inf where empty) and index of the box hit per pixel."""
    fx, fy, cx, cy = intrinsics
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    d_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d = d_cam @ pose[:3, :3].T
    eye = pose[:3, 3]
    best = np.full(d.shape[0], np.inf)
    which = np.full(d.shape[0], -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for k, b in enumerate(boxes):
            t1 = (b.lo - eye) * inv
            t2 = (b.hi - eye) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmax > 0) & (tmin < best)
            t = np.where(tmin > 0, tmin, tmax)
            hit &= t < best
            best = np.where(hit, t, best)
            which = np.where(hit, k, which)
    return best.reshape(height, width), which.reshape(height, width)


def synthesize_frames(g: SceneGraph3D, rig: CameraRig = CameraRig()) -> Tuple[List[FrameRecord], List[Dict[int, int]]]:
    """Render depth + instance masks of the scene's boxes from a fixed camera rig.

    Markers are assigned 1.. in ascending object id among visible objects;
    the second return value maps each frame's markers to object ids.
    Depth arrays are attached; ``depth_path`` is left for the writer to set.
    """
    ids = sorted(g.nodes)
    boxes = [g.nodes[i].aabb for i in ids]
    f = (min(rig.width, rig.height) / 2.0) / math.tan(math.radians(rig.half_fov_deg))
    intr = (f, f, rig.width / 2.0, rig.height / 2.0)
    frames, bindings = [], []
    for fid, pose in enumerate(rig_poses(rig)):
        depth_m, which = raycast_boxes(boxes, intr, pose, rig.width, rig.height)
        depth_mm = np.where(np.isfinite(depth_m), np.round(depth_m * 1000.0), 0).astype(np.uint16)
        dets = []
        binding = {}
        marker = 1
        for k, oid in enumerate(ids):
            mask = (which == k) & (depth_mm > 0)
            if int(mask.sum()) < rig.min_pixels:
                continue
            obj = g.nodes[oid]
            dets.append(Detection(marker, obj.label, 0.9, tuple(rle_encode(mask)), f"a {obj.label}", mask))
            binding[marker] = oid
            marker += 1
        frames.append(FrameRecord(fid, intr, pose, "", rig.width, rig.height, tuple(dets), depth_mm))
        bindings.append(binding)
    return frames, bindings


def relation_script(frames: Sequence[FrameRecord], g: SceneGraph3D, bindings: Sequence[Dict[int, int]]) -> List[Tuple[str, str]]:
    """Mock-VLM rules answering each frame's marker prompt with the true relations among its markers."""
    rules = []
    for frame, binding in zip(frames, bindings):
        inv = {oid: m for m, oid in binding.items()}
        lines = []
        for e in g.edges:
            if e.src_id in inv and e.dst_id in inv:
                a, b = g.nodes[e.src_id], g.nodes[e.dst_id]
                lines.append(f"{a.label}[{inv[e.src_id]}] is {e.predicate} {b.label}[{inv[e.dst_id]}]")
        rules.append((f"Image id: {frame.frame_id}\n", "\n".join(lines)))
    return rules
