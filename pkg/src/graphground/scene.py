"""Core domain types: object instances, scene graphs, query graphs and mappings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping as TMapping, Optional, Sequence, Tuple

import numpy as np

NEG_INF = float("-inf")
EMBED_NORM_TOL = 1e-6


class DegenerateEmbedding(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AABB:
    """Axis-aligned box in the world frame (meters)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"invalid box: min {lo.tolist()} exceeds max {hi.tolist()}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_points(cls, points: np.ndarray) -> "AABB":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot bound an empty point set")
        return cls(pts.min(axis=0), pts.max(axis=0))

    @classmethod
    def from_center_size(cls, center, size) -> "AABB":
        c = np.asarray(center, dtype=np.float64)
        half = np.asarray(size, dtype=np.float64) / 2.0
        return cls(c - half, c + half)

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def degenerate(self) -> bool:
        return self.volume <= 0.0

    def union(self, other: "AABB") -> "AABB":
        return AABB(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> bool:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return bool(np.all(pts >= self.lo - tol) and np.all(pts <= self.hi + tol))

    def corners(self) -> np.ndarray:
        """The 8 corners, ordered by (x, y, z) bit pattern."""
        idx = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)])
        return np.where(idx == 1, self.hi, self.lo)

    def to_list(self) -> List[List[float]]:
        return [self.lo.tolist(), self.hi.tolist()]

    def __eq__(self, other):
        if not isinstance(other, AABB):
            return NotImplemented
        return bool(np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi))

    def __repr__(self):
        return f"AABB(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


def aabb_iou(a: AABB, b: AABB) -> float:
    """3D intersection-over-union of two axis-aligned boxes.

    Zero-volume boxes score 0 against anything except an identical box.
    """
    if a.degenerate or b.degenerate:
        return 1.0 if a == b else 0.0
    inter = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None)
    inter_vol = float(np.prod(inter))
    if inter_vol <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter_vol
    return min(1.0, inter_vol / union)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateEmbedding("degenerate embedding")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0 or not math.isfinite(n):
        raise DegenerateEmbedding("degenerate embedding")
    return v / n


@dataclass(frozen=True, eq=False)
class ObjectInstance:
    id: int
    label: str
    points: np.ndarray
    aabb: AABB
    embedding: np.ndarray
    captions: Tuple[str, ...] = ()
    num_observations: int = 1

    def __post_init__(self):
        if self.id < 0:
            raise ValueError("object id must be non-negative")
        if self.num_observations < 1:
            raise ValueError("num_observations must be >= 1")
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        emb = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if abs(float(np.linalg.norm(emb)) - 1.0) > EMBED_NORM_TOL:
            raise ValueError(f"object {self.id}: embedding is not unit norm")
        object.__setattr__(self, "label", self.label.strip().lower())
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "embedding", emb)
        object.__setattr__(self, "captions", tuple(self.captions))

    @property
    def centroid(self) -> np.ndarray:
        return self.aabb.center

    @property
    def degenerate(self) -> bool:
        return self.aabb.degenerate

    def with_points(self, points: np.ndarray) -> "ObjectInstance":
        return replace(self, points=points, aabb=AABB.from_points(points))


@dataclass(frozen=True)
class RelationEdge:
    src_id: int
    dst_id: int
    predicate: str
    count: int = 1
    provenance: str = "vlm"

    def __post_init__(self):
        if self.src_id == self.dst_id:
            raise ValueError(f"self-relation on object {self.src_id}")
        if self.count < 1:
            raise ValueError("edge count must be >= 1")
        if self.provenance not in ("vlm", "geometric"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True, eq=False)
class SceneGraph3D:
    nodes: Dict[int, ObjectInstance] = field(default_factory=dict)
    edges: Tuple[RelationEdge, ...] = ()
    embedding_dim: Optional[int] = None

    def __post_init__(self):
        nodes = {int(k): v for k, v in sorted(self.nodes.items())}
        for oid, obj in nodes.items():
            if oid != obj.id:
                raise ValueError(f"node key {oid} does not match object id {obj.id}")
        dims = {obj.embedding.shape[0] for obj in nodes.values()}
        if len(dims) > 1:
            raise ValueError(f"mixed embedding dimensions {sorted(dims)}")
        dim = self.embedding_dim
        if dims:
            (found,) = dims
            if dim is not None and dim != found:
                raise ValueError(f"embedding dimension mismatch: header {dim}, nodes {found}")
            dim = found
        for e in self.edges:
            if e.src_id not in nodes or e.dst_id not in nodes:
                raise ValueError(f"edge {e.src_id}->{e.dst_id} references a missing node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "embedding_dim", dim)

    @property
    def label_space(self) -> List[str]:
        return sorted({n.label for n in self.nodes.values()})

    def __len__(self):
        return len(self.nodes)

    def with_edges(self, edges: Iterable[RelationEdge]) -> "SceneGraph3D":
        return SceneGraph3D(dict(self.nodes), tuple(edges), self.embedding_dim)

    def by_label(self, label: str) -> List[int]:
        return [oid for oid, n in self.nodes.items() if n.label == label]

    def predicates_between(self) -> Dict[Tuple[int, int], List[str]]:
        out: Dict[Tuple[int, int], List[str]] = {}
        for e in self.edges:
            out.setdefault((e.src_id, e.dst_id), []).append(e.predicate)
        return out

    def neighbors(self, oid: int) -> set:
        """One-hop neighbors in either edge direction."""
        out = set()
        for e in self.edges:
            if e.src_id == oid:
                out.add(e.dst_id)
            elif e.dst_id == oid:
                out.add(e.src_id)
        return out


@dataclass(frozen=True)
class QueryNode:
    label: str
    attributes: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "label", " ".join(self.label.lower().split()))
        object.__setattr__(self, "attributes", tuple(a.strip().lower() for a in self.attributes if a.strip()))

    @property
    def text(self) -> str:
        """Label text with attributes folded in, used for node scoring."""
        return " ".join([*self.attributes, self.label]).strip()


@dataclass(frozen=True)
class QueryEdge:
    src: int
    dst: int
    predicate: str


@dataclass(frozen=True)
class QueryGraph:
    nodes: Tuple[QueryNode, ...]
    edges: Tuple[QueryEdge, ...] = ()
    raw_query: str = ""

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        if not self.nodes:
            raise ValueError("query graph needs at least one node")

    @property
    def target(self) -> QueryNode:
        return self.nodes[0]

    def edges_in_range(self) -> bool:
        n = len(self.nodes)
        return all(0 <= e.src < n and 0 <= e.dst < n for e in self.edges)


@dataclass(frozen=True)
class MatcherConfig:
    alpha: float = 0.4
    beta: float = 0.2
    gamma: float = 0.3
    delta: float = 0.1
    label_sim_threshold: float = 0.5
    top_k_fallback: int = 5
    allow_landmark_skip: bool = True
    # "exhaustive": skipping a landmark is explored as an extra branch;
    # "last_resort": a landmark is skipped only when its candidates are exhausted.
    skip_policy: str = "exhaustive"
    use_edges: bool = True

    def __post_init__(self):
        weights = (self.alpha, self.beta, self.gamma, self.delta)
        if any(w < 0 for w in weights):
            raise ValueError("score weights must be non-negative")
        total = sum(weights)
        if total <= 0:
            raise ValueError("score weights must not all be zero")
        for name, w in zip(("alpha", "beta", "gamma", "delta"), weights):
            object.__setattr__(self, name, w / total)
        if not 0.0 <= self.label_sim_threshold <= 1.0:
            raise ValueError("label_sim_threshold must lie in [0, 1]")
        if self.top_k_fallback < 1:
            raise ValueError("top_k_fallback must be positive")
        if self.skip_policy not in ("exhaustive", "last_resort"):
            raise ValueError(f"unknown skip_policy {self.skip_policy!r}")

    @property
    def weights(self) -> Tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)


@dataclass(frozen=True)
class Mapping:
    """Injective partial assignment of query-node indices to object ids, with its score."""

    assignment: Tuple[Tuple[int, int], ...]
    n_query_nodes: int
    s_target: float = 0.0
    s_node_mean: float = 0.0
    s_edge_mean: float = 0.0
    completion: float = 0.0
    total: float = NEG_INF

    def __post_init__(self):
        pairs = tuple(sorted((int(q), int(o)) for q, o in dict(self.assignment).items()))
        objs = [o for _, o in pairs]
        if len(set(objs)) != len(objs):
            raise ValueError(f"mapping is not injective: {pairs}")
        object.__setattr__(self, "assignment", pairs)

    @classmethod
    def of(cls, assignment: TMapping[int, int], n_query_nodes: int) -> "Mapping":
        return cls(tuple(assignment.items()), n_query_nodes)

    @property
    def as_dict(self) -> Dict[int, int]:
        return dict(self.assignment)

    @property
    def size(self) -> int:
        return len(self.assignment)

    @property
    def target_id(self) -> Optional[int]:
        return self.as_dict.get(0)

    def components(self) -> Dict[str, float]:
        return {
            "s_target": self.s_target,
            "s_node": self.s_node_mean,
            "s_edge": self.s_edge_mean,
            "completion": self.completion,
        }


def weighted_total(cfg: MatcherConfig, s_target: float, s_node: float, s_edge: float, completion: float) -> float:
    return cfg.alpha * s_target + cfg.beta * s_node + cfg.gamma * s_edge + cfg.delta * completion


def sorted_ids(ids: Sequence[int]) -> List[int]:
    return sorted(int(i) for i in ids)
