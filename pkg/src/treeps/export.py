"""Canonical JSON and DOT renderings of a credited rollout tree.

The JSON document is the interchange format: the DOT graph is produced from
the document alone, so an exported tree can be re-rendered without the
objects that built it.
"""

from __future__ import annotations

import json
from typing import Mapping, Optional

from .core import Node, NodeId, NodeStatus, PromptContext, Question, Step, Tree
from .credit import NodeCredit

SCHEMA_KEYS = ("question_id", "config_digest", "nodes", "layers")


def _num(x: Optional[float]) -> Optional[float]:
    return None if x is None else float(x)


def tree_to_json(tree: Tree, credits: Mapping[NodeId, NodeCredit], config_digest: str) -> dict:
    """Nodes in id order; pruned nodes carry null value, leaf count and advantage."""
    nodes = []
    for nid in sorted(tree.nodes):
        n = tree.nodes[nid]
        c = credits.get(nid)
        nodes.append({
            "id": nid,
            "parent": n.parent_id,
            "depth": n.depth,
            "status": n.status.value,
            "step": None if n.step is None else n.step.to_dict(),
            "value": None if c is None else _num(c.value),
            "leaf_count": None if c is None else c.leaf_count,
            "advantage": None if c is None else _num(c.advantage),
        })
    return {
        "question_id": tree.question.id,
        "config_digest": config_digest,
        "nodes": nodes,
        "layers": [list(layer) for layer in tree.layers],
    }


def dumps_tree(doc: Mapping) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def tree_from_json(doc: Mapping, question: Question, template: str = "{input_question}",
                   max_depth: Optional[int] = None) -> tuple[Tree, dict[NodeId, NodeCredit]]:
    """Rebuild a Tree and its credits from a document written by :func:`tree_to_json`."""
    if question.id != doc["question_id"]:
        raise ValueError(f"document is for question {doc['question_id']!r}, not {question.id!r}")
    nodes, credits = {}, {}
    for d in doc["nodes"]:
        step = None if d["step"] is None else Step.from_dict(d["step"])
        nodes[d["id"]] = Node(d["id"], d["parent"], d["depth"], step, NodeStatus(d["status"]))
        if d["value"] is not None:
            credits[d["id"]] = NodeCredit(d["id"], d["leaf_count"], d["value"], d["advantage"])
    depth = max_depth if max_depth is not None else max(n.depth for n in nodes.values())
    layers = tuple(tuple(layer) for layer in doc["layers"])
    return Tree(PromptContext(template, question), 0, nodes, layers, depth), credits


def _label(d: Mapping) -> str:
    if d["step"] is None:
        head = "root"
    else:
        a = d["step"]["action"]
        head = a.get("template") or a["kind"]
    parts = [f"{d['id']}: {head}"]
    if d["value"] is not None:
        parts.append(f"V={d['value']:.3f}")
    if d["advantage"] is not None:
        parts.append(f"A={d['advantage']:+.3f}")
    return "\n".join(parts)


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def tree_to_dot(doc: Mapping, manifest_ref: Optional[str] = None) -> str:
    """Graphviz source: pruned nodes dashed, leaves double-circled."""
    lines = []
    if manifest_ref is not None:
        lines.append(f"// manifest: {manifest_ref}")
    lines.append(f"digraph {_quote('tree_' + str(doc['question_id']))} {{")
    lines.append(f"  // config_digest: {doc['config_digest']}")
    lines.append("  node [shape=circle, fontsize=10];")
    for d in doc["nodes"]:
        attrs = [f"label={_quote(_label(d))}"]
        if d["status"] == NodeStatus.LEAF.value:
            attrs.append("shape=doublecircle")
        elif d["status"] == NodeStatus.PRUNED.value:
            attrs.append("style=dashed")
        lines.append(f"  n{d['id']} [{', '.join(attrs)}];")
    for d in doc["nodes"]:
        if d["parent"] is not None:
            style = " [style=dashed]" if d["status"] == NodeStatus.PRUNED.value else ""
            lines.append(f"  n{d['parent']} -> n{d['id']}{style};")
    lines.append("}")
    return "\n".join(lines) + "\n"
