"""Exhaustive reference matcher for cross-checking the DFS search on small instances."""

from __future__ import annotations

import itertools
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..relations import converse
from ..scene import MatcherConfig, QueryGraph, SceneGraph3D

ORACLE_LIMIT = 10 ** 7


def _clamped_cos(u: np.ndarray, v: np.ndarray) -> float:
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return min(1.0, max(0.0, c))


def brute_force_ground(gq: QueryGraph, gs: SceneGraph3D, embedder, candidate_ids: Sequence[Sequence[int]],
                       cfg: MatcherConfig = MatcherConfig()) -> Tuple[Optional[int], float, Dict[int, int]]:
    """Best (target id, total, assignment) over every injective partial assignment.

    Scores are recomputed from raw embeddings with plain numpy; nothing from the
    matcher's scoring path is reused.
    """
    n_q = len(gq.nodes)
    pools = [list(candidate_ids[0])] + [list(c) + [None] if cfg.allow_landmark_skip else list(c)
                                        for c in candidate_ids[1:]]
    size = 1
    for p in pools:
        size *= max(1, len(p))
    if size > ORACLE_LIMIT:
        raise ValueError("instance too large for oracle")

    qvecs = [np.asarray(v, dtype=np.float64) for v in embedder.embed_text([n.text for n in gq.nodes])]
    rel: Dict[Tuple[int, int], List[str]] = {}
    for e in gs.edges:
        rel.setdefault((e.src_id, e.dst_id), []).append(e.predicate)
    pred_vec: Dict[str, np.ndarray] = {}

    def pvec(p):
        if p not in pred_vec:
            pred_vec[p] = np.asarray(embedder.embed_text([p])[0], dtype=np.float64)
        return pred_vec[p]

    def psim(a, b):
        return 1.0 if a == b else _clamped_cos(pvec(a), pvec(b))

    def edge_sim(qpred, a, b):
        vals = [psim(qpred, p) for p in rel.get((a, b), [])]
        vals += [psim(qpred, converse(p)) for p in rel.get((b, a), []) if converse(p) is not None]
        return max(vals, default=0.0)

    w = np.array([cfg.alpha, cfg.beta, cfg.gamma, cfg.delta], dtype=np.float64)
    best_t, best_total, best_assign = None, float("-inf"), {}
    for combo in itertools.product(*pools):
        chosen = [o for o in combo if o is not None]
        if len(set(chosen)) != len(chosen):
            continue
        assign = {i: o for i, o in enumerate(combo) if o is not None}
        node = [_clamped_cos(qvecs[i], gs.nodes[o].embedding) for i, o in assign.items()]
        s_t = node[0]
        s_n = float(np.mean(node))
        if cfg.use_edges and gq.edges:
            s_e = sum(edge_sim(e.predicate, assign[e.src], assign[e.dst])
                      for e in gq.edges if e.src in assign and e.dst in assign) / len(gq.edges)
        else:
            s_e = 0.0
        total = float(w @ np.array([s_t, s_n, s_e, len(assign) / n_q]))
        t = assign[0]
        if total > best_total or (total == best_total and best_t is not None and t < best_t):
            best_t, best_total, best_assign = t, total, assign
    return best_t, best_total, best_assign
