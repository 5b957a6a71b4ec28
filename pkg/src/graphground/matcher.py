"""Ground a query graph in a scene graph.

Three stages: label-level semantic filtering of candidates per query node,
depth-first enumeration of injective mappings with the target fixed first,
and the weighted mapping score

    S(M) = alpha * S_t + beta * mean_assigned(S_n) + gamma * mean_edges(S_e) + delta * |M| / |V_q|.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .relations import converse
from .scene import NEG_INF, Mapping, MatcherConfig, QueryGraph, SceneGraph3D, cosine, weighted_total

log = logging.getLogger(__name__)

NodeScorer = Callable[[int, int], float]
EdgeScorer = Callable[[int, int, int], float]


class UngroundableQuery(ValueError):
    pass


class EmptySceneGraph(ValueError):
    pass


def _sim(u, v) -> float:
    return min(1.0, max(0.0, cosine(u, v)))


@dataclass(frozen=True)
class CandidateSet:
    query_node_idx: int
    matched_label: Optional[str]
    object_ids: Tuple[int, ...]
    label_similarity: float
    fallback: bool = False


def semantic_filter(gq: QueryGraph, gs: SceneGraph3D, embedder, cfg: MatcherConfig = MatcherConfig()) -> List[CandidateSet]:
    """Per query node: the best-matching scene label and all nodes carrying it.

    If even the best label is below ``cfg.label_sim_threshold`` the node falls
    back to the ``top_k_fallback`` objects closest to it by embedding.
    """
    if not gs.nodes:
        raise EmptySceneGraph("empty scene graph")
    labels = gs.label_space
    label_vecs = embedder.embed_text(labels)
    query_vecs = embedder.embed_text([n.label for n in gq.nodes])
    out = []
    for idx, e_q in enumerate(query_vecs):
        best_label, best_sim = labels[0], -np.inf
        for label, vec in zip(labels, label_vecs):
            s = cosine(e_q, vec)
            if s > best_sim:
                best_label, best_sim = label, s
        if best_sim >= cfg.label_sim_threshold:
            ids = tuple(sorted(gs.by_label(best_label)))
            out.append(CandidateSet(idx, best_label, ids, best_sim))
            continue
        ranked = sorted(gs.nodes, key=lambda oid: (-cosine(e_q, gs.nodes[oid].embedding), oid))
        ids = tuple(sorted(ranked[: cfg.top_k_fallback]))
        out.append(CandidateSet(idx, best_label, ids, best_sim, fallback=True))
    return out


class Scorers:
    """Node, target and edge similarity for one (query, scene) pair, memoized."""

    def __init__(self, gq: QueryGraph, gs: SceneGraph3D, embedder, target_scorer=None):
        self.gq, self.gs = gq, gs
        self.embedder = embedder
        self.target_scorer = target_scorer
        self._node_vecs = embedder.embed_text([n.text for n in gq.nodes])
        self._pair_preds = gs.predicates_between()
        self._node_cache: Dict[Tuple[int, int], float] = {}
        self._target_cache: Dict[int, float] = {}
        self._edge_cache: Dict[Tuple[int, int, int], float] = {}
        self._pred_cache: Dict[Tuple[str, str], float] = {}

    def node(self, qi: int, oid: int) -> float:
        key = (qi, oid)
        if key not in self._node_cache:
            self._node_cache[key] = _sim(self._node_vecs[qi], self.gs.nodes[oid].embedding)
        return self._node_cache[key]

    def target(self, oid: int) -> float:
        if self.target_scorer is None:
            return self.node(0, oid)
        if oid not in self._target_cache:
            s = self.target_scorer(self.gq, self.gs.nodes[oid])
            self._target_cache[oid] = self.node(0, oid) if s is None else min(1.0, max(0.0, float(s)))
        return self._target_cache[oid]

    def predicate_similarity(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        key = (a, b)
        if key not in self._pred_cache:
            u, v = self.embedder.embed_text([a, b])
            self._pred_cache[key] = _sim(u, v)
        return self._pred_cache[key]

    def edge(self, k: int, a: int, b: int) -> float:
        """Best match of query edge ``k`` against scene relations a->b (and converses of b->a)."""
        key = (k, a, b)
        if key in self._edge_cache:
            return self._edge_cache[key]
        qpred = self.gq.edges[k].predicate
        best = 0.0
        for p in self._pair_preds.get((a, b), ()):
            best = max(best, self.predicate_similarity(qpred, p))
        for p in self._pair_preds.get((b, a), ()):
            c = converse(p)
            if c is not None:
                best = max(best, self.predicate_similarity(qpred, c))
        self._edge_cache[key] = best
        return best


def score_mapping(m: Mapping, gq: QueryGraph, gs: SceneGraph3D, node_scorer: NodeScorer, edge_scorer: EdgeScorer,
                  cfg: MatcherConfig = MatcherConfig(), target_scorer: Optional[Callable[[int], float]] = None) -> Mapping:
    assign = m.as_dict
    n_q = len(gq.nodes)
    if 0 not in assign:
        return Mapping(m.assignment, n_q, 0.0, 0.0, 0.0, len(assign) / n_q, NEG_INF)
    t_score = target_scorer(assign[0]) if target_scorer is not None else node_scorer(0, assign[0])
    s_node = sum(node_scorer(qi, oid) for qi, oid in assign.items()) / len(assign)
    s_edge = 0.0
    if cfg.use_edges and gq.edges:
        acc = 0.0
        for k, e in enumerate(gq.edges):
            if e.src in assign and e.dst in assign:
                acc += edge_scorer(k, assign[e.src], assign[e.dst])
        s_edge = acc / len(gq.edges)
    completion = len(assign) / n_q
    total = weighted_total(cfg, t_score, s_node, s_edge, completion)
    return Mapping(m.assignment, n_q, t_score, s_node, s_edge, completion, total)


def enumerate_mappings(gq: QueryGraph, candidates: Sequence[CandidateSet],
                       cfg: MatcherConfig = MatcherConfig()) -> Iterator[Mapping]:
    """Yield unscored mappings, target fixed in the outer loop, landmarks by DFS in index order.

    Candidates are explored in ascending id. With ``skip_policy="last_resort"``
    a landmark is left unassigned only when none of its candidates is free and
    only maximal mappings are produced; ``"exhaustive"`` also explores the
    skip branch after every candidate, covering all injective partial mappings.
    """
    n_q = len(gq.nodes)
    sets = [tuple(sorted(c.object_ids)) for c in sorted(candidates, key=lambda c: c.query_node_idx)]
    if len(sets) != n_q:
        raise ValueError("need one candidate set per query node")
    exhaustive = cfg.skip_policy == "exhaustive"

    def dfs(i: int, assign: Dict[int, int], used: set) -> Iterator[Mapping]:
        if i == n_q:
            yield Mapping.of(assign, n_q)
            return
        free = [c for c in sets[i] if c not in used]
        for c in free:
            assign[i] = c
            used.add(c)
            yield from dfs(i + 1, assign, used)
            used.discard(c)
            del assign[i]
        if cfg.allow_landmark_skip and (exhaustive or not free):
            yield from dfs(i + 1, assign, used)

    for t in sets[0]:
        yield from dfs(1, {0: t}, {t})


@dataclass(frozen=True)
class Grounding:
    object_id: int
    mapping: Mapping

    @property
    def total(self) -> float:
        return self.mapping.total


def ground(gq: QueryGraph, gs: SceneGraph3D, embedder, cfg: MatcherConfig = MatcherConfig(),
           target_scorer=None, candidates: Optional[List[CandidateSet]] = None) -> List[Grounding]:
    """Rank target candidates by their best mapping score (ties: lower id)."""
    if not gq.edges_in_range():
        raise ValueError("query graph has a dangling edge index")
    if candidates is None:
        candidates = semantic_filter(gq, gs, embedder, cfg)
    if not candidates[0].object_ids:
        raise UngroundableQuery("ungroundable query: no target candidates")
    sc = Scorers(gq, gs, embedder, target_scorer)
    best: Dict[int, Mapping] = {}
    for m in enumerate_mappings(gq, candidates, cfg):
        scored = score_mapping(m, gq, gs, sc.node, sc.edge, cfg, sc.target)
        t = scored.target_id
        if t not in best or scored.total > best[t].total:
            best[t] = scored
    if not best:
        raise UngroundableQuery("ungroundable query: no admissible mapping")
    ranked = sorted(best.items(), key=lambda kv: (-kv[1].total, kv[0]))
    return [Grounding(t, m) for t, m in ranked]


def runner_up_margin(ranked: Sequence[Grounding]) -> Optional[float]:
    if len(ranked) < 2:
        return None
    return ranked[0].total - ranked[1].total


def candidate_only(gq: QueryGraph, gs: SceneGraph3D, embedder, cfg: MatcherConfig = MatcherConfig(),
                   target_scorer=None) -> List[Grounding]:
    """Target candidates ranked by target similarity alone (no landmarks, no edges)."""
    single = QueryGraph(gq.nodes[:1], (), gq.raw_query)
    cands = semantic_filter(single, gs, embedder, cfg)
    if not cands[0].object_ids:
        raise UngroundableQuery("ungroundable query: no target candidates")
    sc = Scorers(single, gs, embedder, target_scorer)
    out = []
    for t in cands[0].object_ids:
        s = sc.target(t)
        out.append(Grounding(t, Mapping(((0, t),), len(gq.nodes), s, sc.node(0, t), 0.0,
                                        1.0 / len(gq.nodes), s)))
    out.sort(key=lambda g: (-g.total, g.object_id))
    return out


_DECIMAL = re.compile(r"^\s*([01](?:\.\d+)?|\.\d+)\s*$")


class VLMTargetScorer:
    """Asks a chat model how well an object matches the query; returns a value in [0, 1] or None."""

    PROMPT = ("Query: {query}\nCandidate object: {label}\nDescription: {caption}\n"
              "How well does the candidate match the target of the query? "
              "Answer with a single decimal number between 0 and 1 and nothing else.")

    def __init__(self, chat, attempts: int = 2):
        self.chat = chat
        self.attempts = attempts

    def __call__(self, gq: QueryGraph, obj) -> Optional[float]:
        caption = "; ".join(obj.captions) if obj.captions else obj.label
        text = self.PROMPT.format(query=gq.raw_query or gq.target.text, label=obj.label, caption=caption)
        for _ in range(self.attempts):
            reply = self.chat.chat([{"role": "user", "text": text}])
            m = _DECIMAL.match(str(reply))
            if m:
                return min(1.0, max(0.0, float(m.group(1))))
        log.info("target scorer gave no usable number for object %d; using embedding similarity", obj.id)
        return None
