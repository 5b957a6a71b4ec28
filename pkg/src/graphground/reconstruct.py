"""Fuse per-frame detections into persistent 3D object instances."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN

from .ingest import FrameRecord, backproject_mask
from .scene import AABB, ObjectInstance, SceneGraph3D, aabb_iou, cosine, normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AssociationConfig:
    geom_iou_min: float = 0.25
    sem_cos_min: float = 0.7
    min_points: int = 50
    dbscan_eps: float = 0.05
    dbscan_min_pts: int = 10
    # "iou": 3D AABB IoU; "point_ratio": share of new points within dbscan_eps of the object.
    overlap: str = "iou"
    voxel_size: float = 0.0
    denoise: bool = True

    def __post_init__(self):
        if not 0.0 <= self.geom_iou_min <= 1.0:
            raise ValueError("geom_iou_min must lie in [0, 1]")
        if not -1.0 <= self.sem_cos_min <= 1.0:
            raise ValueError("sem_cos_min must lie in [-1, 1]")
        if self.dbscan_eps <= 0:
            raise ValueError("dbscan_eps must be positive")
        if self.min_points < 1 or self.dbscan_min_pts < 1:
            raise ValueError("point thresholds must be positive")
        if self.overlap not in ("iou", "point_ratio"):
            raise ValueError(f"unknown overlap measure {self.overlap!r}")
        if self.voxel_size < 0:
            raise ValueError("voxel_size must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "AssociationConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown association config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str) -> "AssociationConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _overlap(obj: ObjectInstance, points: np.ndarray, box: AABB, cfg: AssociationConfig) -> float:
    if cfg.overlap == "iou":
        return aabb_iou(obj.aabb, box)
    if len(obj.points) == 0 or len(points) == 0:
        return 0.0
    dist, _ = cKDTree(obj.points).query(points, k=1, distance_upper_bound=cfg.dbscan_eps)
    return float(np.mean(np.isfinite(dist)))


def associate(objects: Dict[int, ObjectInstance], new_points: np.ndarray, new_embedding: np.ndarray,
              new_aabb: AABB, cfg: AssociationConfig = AssociationConfig()) -> Optional[int]:
    """Id of the existing object that best explains a new detection, or None.

    Both gates (overlap and embedding cosine) must pass; among survivors the
    score is 0.5 * overlap + 0.5 * cosine, ties going to the lower id.
    """
    best_id, best_score = None, -np.inf
    for oid in sorted(objects):
        obj = objects[oid]
        geo = _overlap(obj, new_points, new_aabb, cfg)
        if geo < cfg.geom_iou_min:
            continue
        sem = cosine(obj.embedding, new_embedding)
        if sem < cfg.sem_cos_min:
            continue
        score = 0.5 * geo + 0.5 * sem
        if score > best_score:
            best_id, best_score = oid, score
    return best_id


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One point (the voxel mean) per occupied voxel, in voxel-key order."""
    if voxel <= 0 or len(points) == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def merge(target: ObjectInstance, points: np.ndarray, embedding: np.ndarray,
          caption: Optional[str] = None) -> ObjectInstance:
    new = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = np.concatenate([target.points, new])
    n = target.num_observations
    emb = normalize(n * target.embedding + np.asarray(embedding, dtype=np.float64))
    captions = target.captions + ((caption,) if caption else ())
    box = target.aabb.union(AABB.from_points(new)) if len(new) else target.aabb
    return replace(target, points=pts, aabb=box, embedding=emb, captions=captions, num_observations=n + 1)


def largest_cluster(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Boolean mask of the largest DBSCAN cluster (ties: the cluster found first)."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(points)
    valid = labels[labels >= 0]
    if len(valid) == 0:
        return np.zeros(len(points), dtype=bool)
    counts = np.bincount(valid)
    return labels == int(np.argmax(counts))


def denoise(obj: ObjectInstance, cfg: AssociationConfig = AssociationConfig()) -> Optional[ObjectInstance]:
    """Keep the largest density cluster; None when too few points survive."""
    keep = largest_cluster(obj.points, cfg.dbscan_eps, cfg.dbscan_min_pts)
    if int(keep.sum()) < cfg.min_points:
        return None
    if keep.all():
        return obj
    return obj.with_points(obj.points[keep])


@dataclass
class Reconstruction:
    graph: SceneGraph3D
    # frame_id -> {marker: object id}, for detections whose object survived
    bindings: Dict[int, Dict[int, int]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    n_detections: int = 0


def reconstruct(frames: Sequence[FrameRecord], embedder, cfg: AssociationConfig = AssociationConfig()) -> Reconstruction:
    """Greedy per-detection association over frames in ascending frame_id order.

    ``embedder`` must offer ``embed_text``; detection labels are embedded as text.
    """
    if not frames:
        raise ValueError("reconstruction needs at least one frame")
    objects: Dict[int, ObjectInstance] = {}
    raw_bindings: Dict[int, Dict[int, int]] = {}
    warnings: List[str] = []
    next_id = 0
    n_dets = 0
    labels = sorted({d.label for f in frames for d in f.detections})
    label_emb = dict(zip(labels, embedder.embed_text(labels))) if labels else {}

    for frame in sorted(frames, key=lambda f: f.frame_id):
        binding = raw_bindings.setdefault(frame.frame_id, {})
        for det in sorted(frame.detections, key=lambda d: d.marker):
            n_dets += 1
            pts = backproject_mask(frame, det)
            if len(pts) == 0:
                warnings.append(f"frame {frame.frame_id} marker {det.marker}: no valid depth under mask")
                continue
            emb = normalize(label_emb[det.label])
            box = AABB.from_points(pts)
            match = associate(objects, pts, emb, box, cfg)
            if match is None:
                oid = next_id
                next_id += 1
                captions = (det.caption,) if det.caption else ()
                objects[oid] = ObjectInstance(oid, det.label, voxel_downsample(pts, cfg.voxel_size), box, emb, captions, 1)
            else:
                oid = match
                merged = merge(objects[oid], pts, emb, det.caption)
                if cfg.voxel_size > 0:
                    merged = merged.with_points(voxel_downsample(merged.points, cfg.voxel_size))
                objects[oid] = merged
            binding[det.marker] = oid

    if cfg.denoise:
        kept = {}
        for oid, obj in objects.items():
            clean = denoise(obj, cfg)
            if clean is None:
                log.debug("dropping object %d (%s): too few points after denoising", oid, obj.label)
            else:
                kept[oid] = clean
        objects = kept
    for obj in objects.values():
        if obj.degenerate:
            warnings.append(f"object {obj.id} ({obj.label}) has a zero-volume box")
    if not objects:
        warnings.append("no objects survived reconstruction")
        log.warning("no objects survived reconstruction")
    bindings = {fid: {m: oid for m, oid in b.items() if oid in objects} for fid, b in raw_bindings.items()}
    dim = next(iter(label_emb.values())).shape[0] if label_emb else None
    return Reconstruction(SceneGraph3D(objects, (), dim), bindings, warnings, n_dets)


def build_scene(frames: Sequence[FrameRecord], embedder, cfg: AssociationConfig = AssociationConfig()) -> SceneGraph3D:
    return reconstruct(frames, embedder, cfg).graph
