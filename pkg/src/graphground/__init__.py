"""Zero-shot 3D visual grounding by matching query graphs against 3D scene graphs."""

__version__ = "0.1.0"

from .matcher import ground, semantic_filter
from .queryparse import parse_query_llm, parse_query_rules
from .scene import AABB, Mapping, MatcherConfig, ObjectInstance, QueryEdge, QueryGraph, QueryNode, RelationEdge, \
    SceneGraph3D, aabb_iou

__all__ = [
    "AABB", "Mapping", "MatcherConfig", "ObjectInstance", "QueryEdge", "QueryGraph", "QueryNode", "RelationEdge",
    "SceneGraph3D", "aabb_iou", "ground", "semantic_filter", "parse_query_llm", "parse_query_rules",
]
