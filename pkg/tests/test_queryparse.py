import json

import pytest

from graphground.providers import MockChat
from graphground.queryparse import QueryParseError, parse_query_llm, parse_query_rules, validate_query_graph
from graphground.scene import QueryEdge, QueryGraph, QueryNode


def shape(gq):
    return [(n.label, n.attributes) for n in gq.nodes], [(e.src, e.predicate, e.dst) for e in gq.edges]


def test_rules_examples():
    assert shape(parse_query_rules("trash can near the door")) == \
        ([("trash can", ()), ("door", ())], [(0, "near", 1)])
    assert shape(parse_query_rules("sofa")) == ([("sofa", ())], [])
    assert shape(parse_query_rules("cup on the table next to the lamp")) == \
        ([("cup", ()), ("table", ()), ("lamp", ())], [(0, "on", 1), (1, "next to", 2)])


def test_rules_attributes_and_conjunction():
    assert shape(parse_query_rules("the red backpack")) == ([("backpack", ("red",))], [])
    gq = parse_query_rules("the chair left of the table and near the lamp")
    assert shape(gq)[1] == [(0, "left of", 1), (0, "near", 2)]
    gq = parse_query_rules("the chair to the left of the table, near the lamp")
    assert shape(gq)[1] == [(0, "left of", 1), (0, "near", 2)]


def test_rules_between():
    gq = parse_query_rules("the lamp between the sofa and the bed")
    assert shape(gq) == ([("lamp", ()), ("sofa", ()), ("bed", ())], [(0, "near", 1), (0, "near", 2)])


def test_rules_keep_raw_query():
    assert parse_query_rules("The Chair left of the table!").raw_query == "The Chair left of the table!"


def _llm(*replies):
    return MockChat(script=list(replies))


def test_llm_schema():
    doc = {"target": {"label": "chair", "attributes": []}, "landmarks": [{"label": "table", "attributes": []}],
           "relations": [{"src": 0, "rel": "left of", "dst": 1}]}
    gq = parse_query_llm("the chair left of the table", _llm(json.dumps(doc)))
    assert shape(gq) == ([("chair", ()), ("table", ())], [(0, "left of", 1)])
    assert gq.raw_query == "the chair left of the table"


def test_llm_red_backpack_in_code_fence():
    reply = '```json\n{"target": {"label": "backpack", "attributes": ["red"]}, "landmarks": [], "relations": []}\n```'
    assert shape(parse_query_llm("the red backpack", _llm(reply))) == ([("backpack", ("red",))], [])


def test_llm_retry_then_error():
    good = '{"target": {"label": "sofa"}, "landmarks": [], "relations": []}'
    chat = _llm("sorry, no", good)
    assert shape(parse_query_llm("sofa", chat)) == ([("sofa", ())], [])
    assert "not valid JSON" in chat.prompts[1]
    with pytest.raises(QueryParseError, match="unparseable"):
        parse_query_llm("sofa", _llm("garbage", "more garbage"))


def test_llm_empty_inputs():
    with pytest.raises(QueryParseError, match="empty query"):
        parse_query_llm("  ", _llm("x"))
    with pytest.raises(QueryParseError, match="empty target"):
        parse_query_llm("x", _llm('{"target": {"label": ""}}'))


def test_validate():
    ok = QueryGraph((QueryNode("chair"), QueryNode("table")), (QueryEdge(0, 1, "near"),), "")
    assert validate_query_graph(ok) == []
    dangling = QueryGraph((QueryNode("chair"), QueryNode("table")), (QueryEdge(0, 5, "near"),), "")
    assert validate_query_graph(dangling) == ["dangling_edge_index"]
    dup = QueryGraph((QueryNode("lamp"), QueryNode("chair"), QueryNode("chair")), (), "")
    assert validate_query_graph(dup) == ["duplicate_node_labels_without_relations"]
