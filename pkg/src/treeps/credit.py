"""Leaf rewards, Monte Carlo node values and process advantages."""

from __future__ import annotations

import math
import re
import string
from dataclasses import dataclass, replace
from typing import Mapping, Optional

from .core import ANSWER, NodeId, NodeStatus, Tree
from .errors import MissingReward, OrphanInternal

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match_reward(a_pred: str, a_gold: str) -> int:
    if not a_pred:
        return 0
    return int(normalize_answer(a_pred) == normalize_answer(a_gold))


@dataclass(frozen=True)
class RewardRecord:
    leaf_node_id: NodeId
    predicted_answer: str
    reward: int


@dataclass(frozen=True)
class NodeCredit:
    node_id: NodeId
    leaf_count: int
    value: float
    advantage: Optional[float] = None
    global_advantage: Optional[float] = None
    local_advantage: Optional[float] = None


def assign_rewards(tree: Tree) -> dict[NodeId, RewardRecord]:
    """Exact-match reward for every leaf.

    A leaf that ended on a search action (depth cap) has no extractable
    answer and scores 0.
    """
    gold = tree.question.gold_answer
    out = {}
    for nid in tree.leaves():
        action = tree.nodes[nid].step.action
        pred = action.payload if action.kind == ANSWER else ""
        out[nid] = RewardRecord(nid, pred, exact_match_reward(pred, gold))
    return out


def estimate_values(tree: Tree, rewards: Mapping[NodeId, RewardRecord]) -> dict[NodeId, NodeCredit]:
    """Bottom-up pass: V(n) = mean reward over the non-pruned leaves below n."""
    totals: dict[NodeId, tuple[int, int]] = {}  # node -> (reward sum, leaf count)
    live = [n for n in tree.nodes.values() if n.status is not NodeStatus.PRUNED]
    for node in sorted(live, key=lambda n: (-n.depth, n.node_id)):
        nid = node.node_id
        if node.status is NodeStatus.LEAF:
            if nid not in rewards:
                raise MissingReward(f"leaf {nid} has no reward record")
            totals[nid] = (rewards[nid].reward, 1)
            continue
        kids = tree.children(nid)
        if not kids:
            raise OrphanInternal(f"internal node {nid} has no descendant leaves")
        totals[nid] = (sum(totals[c][0] for c in kids), sum(totals[c][1] for c in kids))
    return {nid: NodeCredit(nid, cnt, s / cnt) for nid, (s, cnt) in totals.items()}


def process_advantage(value: float, root_value: float, parent_value: float, leaf_count: int) -> float:
    return (2.0 * value - root_value - parent_value) / math.sqrt(leaf_count)


def compute_advantages(tree: Tree, credits: Mapping[NodeId, NodeCredit]) -> dict[NodeId, NodeCredit]:
    """Attach the global, local and combined advantage to every non-root node.

    Depth-1 nodes use the root as their parent, so their local and global
    advantages coincide.
    """
    v_root = credits[tree.root_id].value
    out = {}
    for nid, c in credits.items():
        node = tree.nodes[nid]
        if node.parent_id is None:
            out[nid] = c
            continue
        v_parent = credits[node.parent_id].value
        out[nid] = replace(
            c,
            advantage=process_advantage(c.value, v_root, v_parent, c.leaf_count),
            global_advantage=c.value - v_root,
            local_advantage=c.value - v_parent,
        )
    return out


def credit_tree(tree: Tree) -> tuple[dict[NodeId, RewardRecord], dict[NodeId, NodeCredit]]:
    """Rewards, values and advantages in one call."""
    rewards = assign_rewards(tree)
    return rewards, compute_advantages(tree, estimate_values(tree, rewards))
