"""When graph matching is not decisive, ask a VLM to pick among rendered candidates."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .matcher import Grounding
from .render import CameraSpec, render_candidates
from .scene import QueryGraph, SceneGraph3D

log = logging.getLogger(__name__)

ROOM_LEXICON = frozenset({"room", "wall", "floor", "ceiling", "corner", "center"})
TIE_BREAK_ATTEMPTS = 2

REASONS = ("close_candidates_neighbor_overlap", "no_landmarks", "room_only", "forced", "none")


@dataclass(frozen=True)
class GateConfig:
    margin: float = 0.05
    near_m: float = 1.5
    min_shared_neighbors: int = 1
    max_candidates: int = 4
    room_lexicon: frozenset = ROOM_LEXICON


@dataclass(frozen=True)
class GateDecision:
    fire: bool
    reason: str
    candidates: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown gate reason {self.reason!r}")
        if self.fire and (self.reason == "none" or not self.candidates):
            raise ValueError("a firing gate needs a reason and candidates")


def _room_only(gq: QueryGraph, lexicon) -> bool:
    if len(gq.nodes) < 2:
        return False
    if gq.edges:
        landmark_idx = {i for e in gq.edges for i in (e.src, e.dst) if i != 0}
    else:
        landmark_idx = set(range(1, len(gq.nodes)))
    return bool(landmark_idx) and all(gq.nodes[i].label in lexicon for i in landmark_idx)


def close_pair(gs: SceneGraph3D, a: int, b: int, cfg: GateConfig) -> bool:
    shared = (gs.neighbors(a) & gs.neighbors(b)) - {a, b}
    dist = float(np.linalg.norm(gs.nodes[a].centroid - gs.nodes[b].centroid))
    return len(shared) >= cfg.min_shared_neighbors and dist < cfg.near_m


def should_gate(ranked: Sequence[Grounding], gq: QueryGraph, gs: SceneGraph3D,
                cfg: GateConfig = GateConfig()) -> GateDecision:
    """Pure decision from the ranking and the two graphs; makes no provider calls."""
    top = tuple(g.object_id for g in ranked[: cfg.max_candidates])
    if not ranked:
        return GateDecision(False, "none")
    if len(gq.nodes) == 1:
        return GateDecision(True, "no_landmarks", top)
    if _room_only(gq, cfg.room_lexicon):
        return GateDecision(True, "room_only", top)
    if len(ranked) >= 2:
        first = ranked[0]
        close = [first.object_id]
        for g in ranked[1:]:
            if len(close) >= cfg.max_candidates:
                break
            if first.total - g.total < cfg.margin and close_pair(gs, first.object_id, g.object_id, cfg):
                close.append(g.object_id)
        if len(close) >= 2:
            return GateDecision(True, "close_candidates_neighbor_overlap", tuple(close))
    return GateDecision(False, "none")


@dataclass
class TieBreakRequest:
    image: np.ndarray
    text: str
    marker_map: Dict[int, int]  # marker -> object id

    def __post_init__(self):
        for marker in self.marker_map:
            if f"[{marker}]" not in self.text:
                raise ValueError(f"marker {marker} is drawn but not described")


PROMPT_HEAD = (
    "The image shows a rendered view of a 3D scene. Candidate objects are outlined with "
    "numbered boxes.\nQuery: {query}\nCandidates:\n"
)
PROMPT_TAIL = (
    "Which candidate does the query refer to? Answer with the candidate number only, "
    "or NONE if no candidate fits."
)


def build_tie_break(gs: SceneGraph3D, gq: QueryGraph, candidates: Sequence[int],
                    camera: Optional[CameraSpec] = None) -> TieBreakRequest:
    marker_map = {i + 1: oid for i, oid in enumerate(candidates)}
    markers = {oid: m for m, oid in marker_map.items()}
    lines = []
    for m, oid in marker_map.items():
        obj = gs.nodes[oid]
        caption = "; ".join(obj.captions) if obj.captions else "no caption"
        lines.append(f"[{m}] {obj.label}: {caption}")
    text = PROMPT_HEAD.format(query=gq.raw_query or gq.target.text) + "\n".join(lines) + "\n" + PROMPT_TAIL
    image = render_candidates(gs, list(candidates), camera, markers)
    return TieBreakRequest(image, text, marker_map)


_ANSWER = re.compile(r"^\[?\s*(\d+|none)\s*\]?\.?$", re.I)


def parse_choice(reply: str, marker_map: Dict[int, int]) -> Tuple[bool, Optional[int]]:
    """(understood, object id or None)."""
    m = _ANSWER.match(str(reply).strip())
    if not m:
        return False, None
    token = m.group(1).lower()
    if token == "none":
        return True, None
    marker = int(token)
    if marker not in marker_map:
        return False, None
    return True, marker_map[marker]


def tie_break(req: TieBreakRequest, vlm, attempts: int = TIE_BREAK_ATTEMPTS,
              transcript: Optional[list] = None) -> Optional[int]:
    """Chosen object id, or None for a null answer or when no attempt parses."""
    for _ in range(attempts):
        reply = vlm.chat([{"role": "user", "text": req.text, "image": req.image}])
        if transcript is not None:
            transcript.append({"prompt": req.text, "reply": reply})
        ok, choice = parse_choice(reply, req.marker_map)
        if ok:
            return choice
    return None


def resolve(ranked: Sequence[Grounding], decision: GateDecision, choice: Optional[int]) -> Tuple[int, str]:
    if not ranked:
        raise ValueError("nothing to resolve")
    if decision.fire and choice is not None and choice in decision.candidates:
        return choice, "vlm"
    return ranked[0].object_id, "graph"
