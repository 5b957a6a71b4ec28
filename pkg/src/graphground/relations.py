"""Marker-guided relation extraction and 2D-to-3D lifting.

Relation response grammar, one relation per line::

    <label words>[<marker>] <predicate words> <label words>[<marker>]

e.g. ``cup[1] is on top of table[3]``. Leading copulas ("is", "are") and
trailing articles are stripped from the predicate. Lines that do not match
are skipped and counted; the parser never raises.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .ingest import FrameRecord, rle_decode
from .scene import RelationEdge, SceneGraph3D

log = logging.getLogger(__name__)

ANTONYMS = {
    "left of": "right of",
    "right of": "left of",
    "above": "below",
    "below": "above",
    "in front of": "behind",
    "behind": "in front of",
}
SYMMETRIC = {"near", "next to", "beside"}
GEOMETRIC_PREDICATES = ("left of", "right of", "above", "below", "near", "on top of")

_COPULAS = ("is", "are", "was", "were")
_ARTICLES = {"the", "a", "an"}
_BULLET = re.compile(r"^\s*(?:[-*\u2022]|\d+[.)])\s*")


def normalize_predicate(text: str) -> str:
    words = re.sub(r"[^\w\s\-]", " ", text.lower()).split()
    while words and words[0] in _COPULAS:
        words = words[1:]
    while words and words[-1] in _ARTICLES:
        words = words[:-1]
    return " ".join(words)


def converse(predicate: str) -> Optional[str]:
    """Predicate that holds for the reversed pair, if it is known."""
    if predicate in ANTONYMS:
        return ANTONYMS[predicate]
    if predicate in SYMMETRIC:
        return predicate
    return None


@dataclass(frozen=True)
class RelationTriple:
    src_marker: int
    dst_marker: int
    predicate: str
    frame_id: int

    def __post_init__(self):
        if self.src_marker == self.dst_marker:
            raise ValueError("relation triple needs two distinct markers")
        if not self.predicate:
            raise ValueError("relation triple needs a predicate")


@dataclass
class MarkerPrompt:
    text: str
    # (marker, (u, v)) pairs: where the caller should draw each marker
    annotations: List[Tuple[int, Tuple[float, float]]]
    image: Optional[str] = None


@dataclass
class RelationParse:
    triples: List[RelationTriple] = field(default_factory=list)
    failures: int = 0
    dangling: int = 0


@dataclass
class LiftResult:
    edges: List[RelationEdge] = field(default_factory=list)
    dropped: int = 0
    self_relations: int = 0


def mask_centroid(frame: FrameRecord, det) -> Tuple[float, float]:
    mask = det.mask if det.mask is not None else rle_decode(det.mask_rle, frame.width, frame.height)
    v, u = np.nonzero(mask)
    if len(u) == 0:
        return (frame.width / 2.0, frame.height / 2.0)
    return (float(u.mean()), float(v.mean()))


def build_marker_prompt(frame: FrameRecord) -> MarkerPrompt:
    if not frame.detections:
        raise ValueError(f"frame {frame.frame_id} has no detections to mark")
    dets = sorted(frame.detections, key=lambda d: d.marker)
    listing = ", ".join(f"{d.label}[{d.marker}]" for d in dets)
    text = (
        f"Image id: {frame.frame_id}\n"
        "Each object in the image is marked with a numeric marker at its center.\n"
        f"Marked objects: {listing}\n"
        "Describe the spatial relationships between the marked objects. "
        "Write one relation per line in the form\n"
        "  label[marker] <relation> label[marker]\n"
        "for example: cup[1] is on top of table[3]\n"
        "Use only the markers listed above. Do not add any other text."
    )
    annotations = [(d.marker, mask_centroid(frame, d)) for d in dets]
    return MarkerPrompt(text, annotations, frame.rgb_path)


def _strip_label(segment: str, label: Optional[str]) -> str:
    """Remove the object label that precedes a marker from the end of ``segment``."""
    seg = segment.rstrip()
    if label and seg.lower().endswith(label.lower()):
        head = seg[: len(seg) - len(label)]
        if not head or not head[-1].isalnum():
            return head
    words = seg.split()
    return " ".join(words[:-1])


def parse_relations(response: str, frame: FrameRecord) -> RelationParse:
    out = RelationParse()
    labels = {d.marker: d.label for d in frame.detections}
    for raw in str(response).splitlines():
        line = _BULLET.sub("", raw).strip()
        if not line:
            continue
        mentions = list(re.finditer(r"\[(\d+)\]", line))
        if len(mentions) != 2 or not re.search(r"[A-Za-z]", line[: mentions[0].start()]):
            out.failures += 1
            continue
        m1, m2 = mentions
        src, dst = int(m1.group(1)), int(m2.group(1))
        between = line[m1.end(): m2.start()]
        if not re.search(r"[A-Za-z]\s*$", between):
            out.failures += 1
            continue
        predicate = normalize_predicate(_strip_label(between, labels.get(dst)))
        if not predicate or src == dst:
            out.failures += 1
            continue
        if src not in labels or dst not in labels:
            out.dangling += 1
            continue
        out.triples.append(RelationTriple(src, dst, predicate, frame.frame_id))
    return out


def lift_to_3d(triples: Iterable[RelationTriple], binding: Dict[int, int]) -> LiftResult:
    out = LiftResult()
    for t in triples:
        a, b = binding.get(t.src_marker), binding.get(t.dst_marker)
        if a is None or b is None:
            out.dropped += 1
            continue
        if a == b:
            out.self_relations += 1
            continue
        out.edges.append(RelationEdge(a, b, t.predicate, 1, "vlm"))
    return out


def aggregate_edges(edges: Iterable[RelationEdge]) -> List[RelationEdge]:
    """Merge duplicates, summing counts, and settle antonym conflicts per ordered pair by majority."""
    counts: Dict[Tuple[int, int, str], int] = Counter()
    prov: Dict[Tuple[int, int, str], str] = {}
    for e in edges:
        key = (e.src_id, e.dst_id, e.predicate)
        counts[key] += e.count
        if prov.get(key) != "vlm":
            prov[key] = e.provenance
    by_pair: Dict[Tuple[int, int], Dict[str, int]] = defaultdict(dict)
    for (s, d, p), c in counts.items():
        by_pair[(s, d)][p] = c
    out = []
    for (s, d), preds in sorted(by_pair.items()):
        for p, c in sorted(preds.items()):
            anti = ANTONYMS.get(p)
            if anti is not None and preds.get(anti, 0) > c:
                continue
            out.append(RelationEdge(s, d, p, c, prov[(s, d, p)]))
    return out


@dataclass(frozen=True)
class GeometryConfig:
    max_distance: float = 2.0
    margin: float = 0.05
    near_gap: float = 0.5


def _gap(a_lo, a_hi, b_lo, b_hi) -> np.ndarray:
    return np.maximum(0.0, np.maximum(b_lo - a_hi, a_lo - b_hi))


def pair_predicates(a, b, cfg: GeometryConfig = GeometryConfig()) -> List[str]:
    """Geometric predicates "a <p> b" from world-axis comparisons (z up, x grows rightwards)."""
    if np.linalg.norm(a.centroid - b.centroid) > cfg.max_distance:
        return []
    al, ah, bl, bh = a.aabb.lo, a.aabb.hi, b.aabb.lo, b.aabb.hi
    m = cfg.margin
    out = []
    if bl[0] - ah[0] > m:
        out.append("left of")
    if al[0] - bh[0] > m:
        out.append("right of")
    xy_overlap = ah[0] > bl[0] and bh[0] > al[0] and ah[1] > bl[1] and bh[1] > al[1]
    if xy_overlap:
        if al[2] >= bh[2] - m and a.centroid[2] > b.centroid[2]:
            out.append("above")
            if al[2] - bh[2] <= m:
                out.append("on top of")
        elif bl[2] >= ah[2] - m and b.centroid[2] > a.centroid[2]:
            out.append("below")
    if float(np.linalg.norm(_gap(al, ah, bl, bh))) <= cfg.near_gap:
        out.append("near")
    return out


def geometric_relations(g: SceneGraph3D, cfg: GeometryConfig = GeometryConfig(),
                        existing: Optional[Iterable[RelationEdge]] = None) -> List[RelationEdge]:
    taken = {(e.src_id, e.dst_id) for e in (g.edges if existing is None else existing) if e.provenance == "vlm"}
    ids = sorted(g.nodes)
    out = []
    for i in ids:
        for j in ids:
            if i == j or (i, j) in taken:
                continue
            for p in pair_predicates(g.nodes[i], g.nodes[j], cfg):
                out.append(RelationEdge(i, j, p, 1, "geometric"))
    return out


@dataclass
class RelationStats:
    frames: int = 0
    triples: int = 0
    parse_failures: int = 0
    dangling: int = 0
    unbound: int = 0
    self_relations: int = 0


def extract_relations(frames: Sequence[FrameRecord], bindings: Dict[int, Dict[int, int]], chat,
                      stride: int = 1) -> Tuple[List[RelationEdge], RelationStats]:
    """Run set-of-marks prompting on every ``stride``-th frame and lift the answers to 3D edges."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    stats = RelationStats()
    edges: List[RelationEdge] = []
    for k, frame in enumerate(sorted(frames, key=lambda f: f.frame_id)):
        if k % stride or not frame.detections:
            continue
        prompt = build_marker_prompt(frame)
        msg = {"role": "user", "text": prompt.text}
        if prompt.image:
            msg["image"] = prompt.image
        parsed = parse_relations(chat.chat([msg]), frame)
        lifted = lift_to_3d(parsed.triples, bindings.get(frame.frame_id, {}))
        stats.frames += 1
        stats.triples += len(parsed.triples)
        stats.parse_failures += parsed.failures
        stats.dangling += parsed.dangling
        stats.unbound += lifted.dropped
        stats.self_relations += lifted.self_relations
        edges.extend(lifted.edges)
    return edges, stats


def relate_scene(g: SceneGraph3D, vlm_edges: Iterable[RelationEdge] = (), geometric: bool = True,
                 geo_cfg: GeometryConfig = GeometryConfig()) -> SceneGraph3D:
    """Attach aggregated VLM edges, plus geometric fallbacks for pairs without VLM evidence.

    Existing geometric edges are recomputed rather than accumulated.
    """
    vlm = aggregate_edges([e for e in g.edges if e.provenance == "vlm"] + list(vlm_edges))
    geo = geometric_relations(g, geo_cfg, vlm) if geometric else []
    return g.with_edges(aggregate_edges(vlm + geo))


def edge_to_json(e: RelationEdge) -> str:
    return json.dumps({"src": e.src_id, "dst": e.dst_id, "predicate": e.predicate, "count": e.count,
                       "provenance": e.provenance}, sort_keys=True)
