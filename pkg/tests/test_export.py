import json

from conftest import hand_tree
from treeps.core import NodeStatus
from treeps.credit import credit_tree
from treeps.export import SCHEMA_KEYS, dumps_tree, tree_from_json, tree_to_dot, tree_to_json
from treeps.policy import TabularPolicy
from treeps.tree import RolloutConfig, build_tree


def _built(world, retriever, seed=4):
    corpus, qs = world
    tree = build_tree(qs[0], TabularPolicy(corpus), retriever, RolloutConfig(seed=seed))
    return tree, credit_tree(tree)[1]


def test_schema(world, retriever):
    tree, credits = _built(world, retriever)
    doc = tree_to_json(tree, credits, "abc")
    assert tuple(doc) == SCHEMA_KEYS
    assert doc["config_digest"] == "abc" and doc["question_id"] == tree.question.id
    for n in doc["nodes"]:
        assert set(n) == {"id", "parent", "depth", "status", "step", "value", "leaf_count", "advantage"}
        if n["status"] == NodeStatus.PRUNED.value:
            assert n["value"] is None and n["advantage"] is None
    assert doc["nodes"][0]["step"] is None and doc["nodes"][0]["advantage"] is None
    assert doc["layers"][0] == [0]


def test_json_round_trip(world, retriever):
    tree, credits = _built(world, retriever)
    doc = json.loads(dumps_tree(tree_to_json(tree, credits, "d")))
    back, back_credits = tree_from_json(doc, tree.question, max_depth=tree.max_depth)
    assert dict(back.nodes) == dict(tree.nodes) and back.layers == tree.layers
    assert dumps_tree(tree_to_json(back, back_credits, "d")) == dumps_tree(doc)


def test_dot_styles(world, retriever):
    tree, rewards = hand_tree([[1, 0], 1])
    from dataclasses import replace
    nodes = dict(tree.nodes)
    nodes[5] = replace(nodes[3], node_id=5, status=NodeStatus.PRUNED, parent_id=0, depth=1)
    tree = type(tree)(tree.context, 0, nodes, tree.layers, tree.max_depth)
    _, credits = credit_tree(tree)
    dot = tree_to_dot(tree_to_json(tree, credits, "d"), "manifest.json")
    lines = dot.splitlines()
    assert lines[0] == "// manifest: manifest.json"
    leaf_lines = [l for l in lines if l.strip().startswith(("n2 ", "n3 ", "n4 "))]
    assert all("shape=doublecircle" in l for l in leaf_lines)
    assert any(l.strip().startswith("n5 ") and "style=dashed" in l for l in lines)
    assert "n0 -> n5 [style=dashed];" in dot
    assert "A=+" in dot or "A=-" in dot
    assert dot.count("{") == dot.count("}")
