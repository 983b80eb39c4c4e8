"""Domain types shared across the package.

Everything here is an immutable value. Trees are assembled by
:mod:`treeps.tree` and frozen afterwards; the other modules only read them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Mapping, Optional

from .errors import DepthLimitExceeded

NodeId = int

SEARCH = "search"
ANSWER = "answer"


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    gold_answer: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("question text must be nonempty")
        if not self.gold_answer.strip():
            raise ValueError("gold answer must be nonempty")


@dataclass(frozen=True)
class TagSet:
    """Tag names used by the prompt template and the action parser."""

    reason: str = "reason"
    search: str = "search"
    information: str = "information"
    answer: str = "answer"

    def __post_init__(self):
        names = (self.reason, self.search, self.information, self.answer)
        if any(not n for n in names) or len(set(names)) != 4:
            raise ValueError(f"tag names must be distinct and nonempty: {names}")


@dataclass(frozen=True)
class PromptContext:
    template: str
    question: Question
    tags: TagSet = TagSet()

    def render(self) -> str:
        return self.template.replace("{input_question}", self.question.text)


@dataclass(frozen=True)
class Action:
    kind: str
    payload: str
    # Name of the policy template that produced this action, when known.
    template: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (SEARCH, ANSWER):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if not self.payload.strip():
            raise ValueError("action payload must be nonempty")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": self.payload, "template": self.template}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Action":
        return cls(d["kind"], d["payload"], d.get("template"))


@dataclass(frozen=True)
class Passage:
    passage_id: str
    text: str


@dataclass(frozen=True)
class Observation:
    passages: tuple[Passage, ...]
    truncated_token_count: int

    @property
    def passage_ids(self) -> frozenset[str]:
        return frozenset(p.passage_id for p in self.passages)

    def to_dict(self) -> dict:
        return {
            "passages": [{"id": p.passage_id, "text": p.text} for p in self.passages],
            "truncated_token_count": self.truncated_token_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Observation":
        passages = tuple(Passage(p["id"], p["text"]) for p in d["passages"])
        return cls(passages, d.get("truncated_token_count", 0))


@dataclass(frozen=True)
class Step:
    reasoning: str
    action: Action
    observation: Optional[Observation] = None

    def __post_init__(self):
        if self.observation is not None and self.action.kind != SEARCH:
            raise ValueError("only search steps carry an observation")

    def to_dict(self) -> dict:
        return {
            "reasoning": self.reasoning,
            "action": self.action.to_dict(),
            "observation": None if self.observation is None else self.observation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Step":
        obs = d.get("observation")
        return cls(
            d["reasoning"],
            Action.from_dict(d["action"]),
            None if obs is None else Observation.from_dict(obs),
        )


@dataclass(frozen=True)
class AgentState:
    context: PromptContext
    history: tuple[Step, ...] = ()
    max_depth: int = 4

    @property
    def depth(self) -> int:
        return len(self.history)


def append_step(state: AgentState, step: Step) -> AgentState:
    """Return a new state with ``step`` appended to the history."""
    if len(state.history) >= state.max_depth:
        raise DepthLimitExceeded(
            f"history already holds {len(state.history)} steps (D={state.max_depth})"
        )
    return AgentState(state.context, state.history + (step,), state.max_depth)


class NodeStatus(str, Enum):
    RETAINED = "retained_internal"
    LEAF = "leaf"
    PRUNED = "pruned"


@dataclass(frozen=True)
class Node:
    node_id: NodeId
    parent_id: Optional[NodeId]
    depth: int
    step: Optional[Step]
    status: NodeStatus

    @property
    def is_root(self) -> bool:
        return self.parent_id is None


def is_terminal(node: Node, max_depth: int) -> bool:
    if node.step is None:
        raise ValueError("the root carries no step")
    return node.step.action.kind == ANSWER or node.depth == max_depth


@dataclass(frozen=True)
class Tree:
    """A frozen rollout tree for one question.

    ``layers[d]`` is the retained parent set M(d) as a tuple of node ids,
    with ``layers[0] == (root_id,)``.
    """

    context: PromptContext
    root_id: NodeId
    nodes: Mapping[NodeId, Node]
    layers: tuple[tuple[NodeId, ...], ...]
    max_depth: int
    branching: tuple[int, ...] = ()  # B_d actually used for d = 1..
    _children: Mapping[NodeId, tuple[NodeId, ...]] = field(
        default=MappingProxyType({}), repr=False, compare=False
    )

    def __post_init__(self):
        if not isinstance(self.nodes, MappingProxyType):
            object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))
        kids: dict[NodeId, list[NodeId]] = {nid: [] for nid in self.nodes}
        for nid in sorted(self.nodes):
            pid = self.nodes[nid].parent_id
            if pid is not None:
                kids[pid].append(nid)
        object.__setattr__(
            self, "_children", MappingProxyType({k: tuple(v) for k, v in kids.items()})
        )

    @property
    def question(self) -> Question:
        return self.context.question

    @property
    def root(self) -> Node:
        return self.nodes[self.root_id]

    def children(self, node_id: NodeId, include_pruned: bool = False) -> tuple[NodeId, ...]:
        kids = self._children[node_id]
        if include_pruned:
            return kids
        return tuple(k for k in kids if self.nodes[k].status is not NodeStatus.PRUNED)

    def leaves(self) -> list[NodeId]:
        return sorted(n.node_id for n in self.nodes.values() if n.status is NodeStatus.LEAF)

    def path_to(self, node_id: NodeId) -> list[NodeId]:
        """Node ids from the root down to ``node_id`` inclusive."""
        path = [node_id]
        while self.nodes[path[-1]].parent_id is not None:
            path.append(self.nodes[path[-1]].parent_id)
        return path[::-1]

    def state_at(self, node_id: NodeId) -> AgentState:
        steps = tuple(self.nodes[n].step for n in self.path_to(node_id)[1:])
        return AgentState(self.context, steps, self.max_depth)


@dataclass(frozen=True)
class Trajectory:
    question_id: str
    steps: tuple[Step, ...]
    leaf_node_id: NodeId
    node_ids: tuple[NodeId, ...]  # root first

    @property
    def final_answer(self) -> str:
        last = self.steps[-1].action
        return last.payload if last.kind == ANSWER else ""
