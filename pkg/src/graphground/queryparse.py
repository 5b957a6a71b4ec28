"""Referring expression -> query graph.

Two parsers share one output shape: an LLM-backed parser with a strict JSON
schema, and a deterministic rule-based parser used for hermetic runs.
Both put the target at node index 0.
"""

from __future__ import annotations

import json
import re
from typing import List, Optional, Sequence, Tuple

from .scene import QueryEdge, QueryGraph, QueryNode

LLM_ATTEMPTS = 2


class QueryParseError(ValueError):
    pass


# longest phrases first so "to the left of" wins over "left of"
_RELATION_PHRASES = [
    ("to the left of", "left of"),
    ("to the right of", "right of"),
    ("on the left of", "left of"),
    ("on the right of", "right of"),
    ("in front of", "in front of"),
    ("on top of", "on top of"),
    ("left of", "left of"),
    ("right of", "right of"),
    ("next to", "next to"),
    ("between", "between"),
    ("behind", "behind"),
    ("inside", "inside"),
    ("above", "above"),
    ("below", "below"),
    ("under", "under"),
    ("near", "near"),
    ("on", "on"),
]
RELATION_LEXICON = tuple(sorted({canon for _, canon in _RELATION_PHRASES}))

_DETERMINERS = {"the", "a", "an", "this", "that", "these", "those", "its", "their"}
_FILLERS = {"which", "that", "who", "is", "are", "it", "located", "placed", "standing", "sitting", "one",
            "object", "there"}
ATTRIBUTE_WORDS = {
    "red", "blue", "green", "yellow", "white", "black", "brown", "gray", "grey", "orange", "pink", "purple",
    "beige", "silver", "golden", "wooden", "metal", "plastic", "glass", "leather",
    "small", "large", "big", "tiny", "tall", "short", "long", "round", "square", "rectangular", "little",
    "old", "new", "dark", "light",
}

_PHRASE_RE = re.compile(r"\b(" + "|".join(re.escape(p) for p, _ in _RELATION_PHRASES) + r")\b")
_CANON = dict(_RELATION_PHRASES)


def _tokens(text: str) -> str:
    return " ".join(re.sub(r"[^a-z0-9\s\-]", " ", text.lower()).split())


def _noun_phrase(words: List[str]) -> Optional[QueryNode]:
    words = [w for w in words if w not in _DETERMINERS and w not in _FILLERS]
    attrs = [w for w in words if w in ATTRIBUTE_WORDS]
    rest = [w for w in words if w not in ATTRIBUTE_WORDS]
    if not rest and attrs:
        rest, attrs = attrs[-1:], attrs[:-1]
    if not rest:
        return None
    return QueryNode(" ".join(rest), tuple(attrs))


def parse_query_rules(q: str) -> QueryGraph:
    """Pattern-based parse over a fixed preposition lexicon.

    Relations chain from the most recent noun phrase ("cup on the table next
    to the lamp" gives cup-on-table, table-next to-lamp) unless the relation
    follows "and" or a comma, in which case it attaches to the target.
    "between A and B" becomes target-near-A and target-near-B.
    """
    text = _tokens(q.replace(",", " and "))
    pieces = _PHRASE_RE.split(text)
    # pieces alternate: segment, phrase, segment, phrase, ...
    segments = [p.split() for p in pieces[0::2]]
    phrases = [_CANON[p] for p in pieces[1::2]]

    head = _noun_phrase(_trim_and(segments[0])[0])
    if head is None:
        return QueryGraph((QueryNode(text or "object"),), (), q)
    nodes: List[QueryNode] = [head]
    edges: List[QueryEdge] = []
    prev = 0
    to_target = False
    for rel, seg in zip(phrases, segments[1:]):
        words, trailing_and = _trim_and(seg)
        src = 0 if to_target else prev
        groups = _split_and(words) if rel == "between" else [words]
        added = []
        for g in groups:
            node = _noun_phrase(g)
            if node is not None:
                nodes.append(node)
                added.append(len(nodes) - 1)
        pred = "near" if rel == "between" else rel
        edges.extend(QueryEdge(src, idx, pred) for idx in added)
        if added:
            prev = added[-1]
        to_target = trailing_and
    return QueryGraph(tuple(nodes), tuple(edges), q)


def _trim_and(words: List[str]) -> Tuple[List[str], bool]:
    words = list(words)
    trailing = False
    while words and words[-1] == "and":
        words.pop()
        trailing = True
    return words, trailing


def _split_and(words: List[str]) -> List[List[str]]:
    out, cur = [], []
    for w in words:
        if w == "and":
            out.append(cur)
            cur = []
        else:
            cur.append(w)
    out.append(cur)
    return out


QUERY_PROMPT = """Convert the referring expression into a query graph.
Respond with JSON only, exactly in this shape:
{{"target": {{"label": "<noun>", "attributes": ["<adjective>", ...]}},
 "landmarks": [{{"label": "<noun>", "attributes": [...]}}, ...],
 "relations": [{{"src": <int>, "rel": "<relation phrase>", "dst": <int>}}, ...]}}
Node indices: 0 is the target, 1..n are the landmarks in listed order.
Use short relation phrases such as "left of", "on top of", "near", "behind".
Referring expression: {query}"""

REINFORCE = "Your previous answer was not valid JSON in the required shape. Respond with JSON only."


def _extract_json(text: str) -> Optional[dict]:
    text = text.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    if fence:
        text = fence.group(1).strip()
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        doc = json.loads(text[start:end + 1])
    except json.JSONDecodeError:
        return None
    return doc if isinstance(doc, dict) else None


def _node(d) -> QueryNode:
    if isinstance(d, str):
        return QueryNode(d)
    attrs = d.get("attributes") or []
    if isinstance(attrs, str):
        attrs = [attrs]
    return QueryNode(str(d.get("label", "")), tuple(str(a) for a in attrs))


def _resolve_index(ref, nodes: Sequence[QueryNode]) -> int:
    if isinstance(ref, bool):
        raise QueryParseError(f"bad node reference {ref!r}")
    if isinstance(ref, int):
        return ref
    if isinstance(ref, str):
        s = ref.strip().lower()
        if s.isdigit():
            return int(s)
        if s == "target":
            return 0
        for i, n in enumerate(nodes):
            if n.label == s:
                return i
    raise QueryParseError(f"bad node reference {ref!r}")


def graph_from_schema(doc: dict, raw_query: str) -> QueryGraph:
    if "target" not in doc:
        raise QueryParseError("response lacks a target")
    target = _node(doc["target"])
    if not target.label:
        raise QueryParseError("empty target label")
    nodes = [target] + [_node(d) for d in doc.get("landmarks") or []]
    edges = []
    for r in doc.get("relations") or []:
        src, dst = _resolve_index(r.get("src"), nodes), _resolve_index(r.get("dst"), nodes)
        rel = " ".join(str(r.get("rel", "")).lower().split())
        if not rel:
            raise QueryParseError("relation without a predicate")
        edges.append(QueryEdge(src, dst, rel))
    return QueryGraph(tuple(nodes), tuple(edges), raw_query)


def parse_query_llm(q: str, client, attempts: int = LLM_ATTEMPTS) -> QueryGraph:
    if not q or not q.strip():
        raise QueryParseError("empty query")
    messages = [{"role": "user", "text": QUERY_PROMPT.format(query=q.strip())}]
    for attempt in range(attempts):
        reply = client.chat(messages)
        doc = _extract_json(reply)
        if doc is not None:
            try:
                return graph_from_schema(doc, q)
            except QueryParseError as exc:
                if "empty target" in str(exc):
                    raise
        messages = messages + [{"role": "assistant", "text": reply}, {"role": "user", "text": REINFORCE}]
    raise QueryParseError("unparseable query response")


DEFECT_CODES = ("extra_relation_suspected", "dangling_edge_index", "duplicate_node_labels_without_relations",
                "empty_target")


def validate_query_graph(gq: QueryGraph) -> List[str]:
    defects = []
    n = len(gq.nodes)
    if len(gq.edges) > n - 1:
        defects.append("extra_relation_suspected")
    if not gq.edges_in_range():
        defects.append("dangling_edge_index")
    touched = {i for e in gq.edges for i in (e.src, e.dst)}
    seen = {}
    for i, node in enumerate(gq.nodes):
        seen.setdefault(node.label, []).append(i)
    if any(len(idx) > 1 and any(i not in touched for i in idx) for idx in seen.values()):
        defects.append("duplicate_node_labels_without_relations")
    if not gq.target.label:
        defects.append("empty_target")
    return defects
