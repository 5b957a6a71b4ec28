"""Per-query grounding under the supported modes (full system and ablations)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional

from .gate import GateConfig, GateDecision, build_tie_break, resolve, should_gate, tie_break
from .matcher import candidate_only, ground, runner_up_margin
from .queryparse import parse_query_llm, parse_query_rules
from .scene import MatcherConfig, QueryGraph, SceneGraph3D

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mode:
    graph: bool  # relational graph matching (otherwise candidate-only ranking)
    edges: bool
    vlm: bool  # VLM tie-break available
    forced: bool = False  # always hand the top candidates to the VLM
    needs_raw_scene: bool = False


MODES: Dict[str, Mode] = {
    "full": Mode(graph=True, edges=True, vlm=True),
    "graph-only": Mode(graph=True, edges=True, vlm=False),
    "no-edges": Mode(graph=True, edges=False, vlm=False),
    "vlm-only": Mode(graph=False, edges=False, vlm=True, forced=True),
    "candidates": Mode(graph=False, edges=False, vlm=False),
    "no-denoise": Mode(graph=False, edges=False, vlm=False, needs_raw_scene=True),
}


class ModeError(ValueError):
    pass


@dataclass
class Grounder:
    scene: SceneGraph3D
    embedder: object
    chat: Optional[object] = None
    mode: str = "full"
    matcher_cfg: MatcherConfig = MatcherConfig()
    gate_cfg: GateConfig = GateConfig()
    parser: str = "rules"
    render_hook: Optional[Callable[[str, object], None]] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        m = MODES[self.mode]
        if m.vlm and self.chat is None:
            raise ModeError(f"mode {self.mode!r} needs a chat provider")
        if self.parser == "llm" and self.chat is None:
            raise ModeError("the LLM query parser needs a chat provider")
        if self.parser not in ("rules", "llm"):
            raise ModeError(f"unknown parser {self.parser!r}")
        if not m.edges:
            self.matcher_cfg = replace(self.matcher_cfg, use_edges=False)

    def parse(self, text: str) -> QueryGraph:
        if self.parser == "llm":
            return parse_query_llm(text, self.chat)
        return parse_query_rules(text)

    def ground_graph(self, query_id: str, gq: QueryGraph) -> dict:
        m = MODES[self.mode]
        if m.graph:
            ranked = ground(gq, self.scene, self.embedder, self.matcher_cfg)
        else:
            ranked = candidate_only(gq, self.scene, self.embedder, self.matcher_cfg)
        if not m.vlm:
            decision = GateDecision(False, "none")
        elif m.forced:
            decision = GateDecision(True, "forced", tuple(g.object_id for g in ranked[: self.gate_cfg.max_candidates]))
        else:
            decision = should_gate(ranked, gq, self.scene, self.gate_cfg)
        choice = None
        if decision.fire:
            req = build_tie_break(self.scene, gq, decision.candidates)
            if self.render_hook is not None:
                self.render_hook(query_id, req.image)
            choice = tie_break(req, self.chat)
        oid, path = resolve(ranked, decision, choice)
        chosen = next(g for g in ranked if g.object_id == oid)
        margin = runner_up_margin(ranked)
        return {
            "query_id": query_id,
            "predicted_object_id": oid,
            "predicted_aabb": self.scene.nodes[oid].aabb.to_list(),
            "total": chosen.total,
            "components": chosen.mapping.components(),
            "path": path,
            "gate_reason": decision.reason,
            "runner_up_margin": margin,
        }

    def run(self, query: dict) -> dict:
        """One query record ``{query_id, text, ...}`` -> result record; errors are reported, not raised."""
        qid = str(query["query_id"])
        try:
            gq = self.parse(query["text"])
            return self.ground_graph(qid, gq)
        except Exception as exc:  # query-level failures are recorded per query
            log.warning("query %s failed: %s", qid, exc)
            return {"query_id": qid, "error": f"{type(exc).__name__}: {exc}"}


def ground_all(grounder: Grounder, queries: List[dict], jobs: int = 1) -> List[dict]:
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(grounder.run, queries))
    else:
        results = [grounder.run(q) for q in queries]
    return sorted(results, key=lambda r: r["query_id"])
