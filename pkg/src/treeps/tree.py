"""Layer-wise online construction of the rollout tree.

Each layer follows generate-then-prune: every retained parent samples
``B_d = ceil(N / |M(d-1)|)`` children, answer children become leaves, and at
most ``N_retain`` search children per parent survive into ``M(d)``.

Randomness is keyed by (seed, depth, parent position, sample index, attempt)
rather than drawn from a shared stream, so the tree does not depend on the
order in which concurrent requests complete.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    SEARCH, AgentState, Node, NodeId, NodeStatus, Observation, PromptContext, Question, Step, Tree,
    append_step,
)
from .errors import ConfigError, InvalidParentCount, PolicyFailure, RetrieverFailure, TreePSError
from .policy import DEFAULT_PROMPT, Policy
from .pruning import PassageSet, random_retain, select_representatives

log = logging.getLogger(__name__)

Retriever = Callable[[str], Observation]

_SAMPLE, _PRUNE = 0, 1


@dataclass(frozen=True)
class RolloutConfig:
    N: int = 8
    D: int = 4
    N_retain: int = 2
    K: int = 3
    temperature: float = 1.0
    max_step_tokens: int = 512
    fixed_branching: Optional[tuple[int, ...]] = None
    seed: int = 0
    pruning_mode: str = "similarity"  # or "random"
    linkage: str = "average"
    max_workers: int = 1

    def __post_init__(self):
        for name in ("N", "D", "N_retain", "K", "max_step_tokens", "max_workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.fixed_branching is not None:
            fb = tuple(int(b) for b in self.fixed_branching)
            if len(fb) != self.D or min(fb) < 1:
                raise ConfigError(f"fixed_branching must list {self.D} positive factors")
            object.__setattr__(self, "fixed_branching", fb)
        if self.pruning_mode not in ("similarity", "random"):
            raise ConfigError(f"unknown pruning_mode {self.pruning_mode!r}")
        if self.linkage not in ("average", "single", "complete"):
            raise ConfigError(f"unknown linkage {self.linkage!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def digest(self) -> str:
        d = asdict(self)
        d.pop("max_workers")  # does not affect results
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LayerState:
    depth: int
    parents: tuple[NodeId, ...]
    branching: int
    sampled_count: int  # |M(d-1)| * B_d
    generated: int  # children that made it into the tree


@dataclass(frozen=True)
class ExpansionResult:
    parent_id: NodeId
    children: tuple[Node, ...]
    search_children: tuple[Node, ...]
    answer_children: tuple[Node, ...]
    retained: tuple[Node, ...]
    dropped: int = 0  # samples discarded after a failed retry


def compute_branching(N: int, parent_count: int) -> int:
    if parent_count < 1:
        raise InvalidParentCount("parent_count must be >= 1; stop expanding instead")
    return math.ceil(N / parent_count)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _sample_child(state, policy, retriever, config, depth, parent_index, sample_index) -> Optional[Step]:
    for attempt in range(2):
        rng = _rng(config.seed, _SAMPLE, depth, parent_index, sample_index, attempt)
        try:
            reasoning, action = policy.generate_step(state, config.temperature, rng)
            break
        except PolicyFailure as e:
            if attempt == 0:
                log.info("regenerating sample %d/%d at depth %d: %s", parent_index, sample_index, depth, e)
            else:
                log.warning("dropping sample %d/%d at depth %d: %s", parent_index, sample_index, depth, e)
                return None
    obs = None
    # depth-D search steps terminate without retrieval
    if action.kind == SEARCH and depth < config.D:
        try:
            obs = retriever(action.payload)
        except TreePSError:
            raise
        except Exception as e:
            raise RetrieverFailure(f"retrieval failed for {action.payload!r}: {e}") from e
    return Step(reasoning, action, obs)


def _assemble(parent: Node, steps: Sequence[Optional[Step]], config: RolloutConfig,
              parent_index: int, first_id: int) -> ExpansionResult:
    depth = parent.depth + 1
    kept = [s for s in steps if s is not None]
    ids = list(range(first_id, first_id + len(kept)))
    search_ids = [i for i, s in zip(ids, kept) if s.action.kind == SEARCH]
    retained_ids: set[NodeId] = set()
    if depth < config.D and search_ids:
        k = min(config.N_retain, len(search_ids))
        by_id = dict(zip(ids, kept))
        if config.pruning_mode == "similarity":
            sets = [PassageSet(i, by_id[i].observation.passage_ids) for i in search_ids]
            retained_ids = set(select_representatives(sets, k, search_ids, config.linkage))
        else:
            retained_ids = set(random_retain(search_ids, k, _rng(config.seed, _PRUNE, depth, parent_index)))
    children = []
    for nid, step in zip(ids, kept):
        if depth == config.D or step.action.kind != SEARCH:
            status = NodeStatus.LEAF
        elif nid in retained_ids:
            status = NodeStatus.RETAINED
        else:
            status = NodeStatus.PRUNED
        children.append(Node(nid, parent.node_id, depth, step, status))
    search = tuple(c for c in children if c.step.action.kind == SEARCH and depth < config.D)
    answer = tuple(c for c in children if c not in search)
    return ExpansionResult(
        parent.node_id, tuple(children), search, answer,
        tuple(c for c in children if c.status is NodeStatus.RETAINED),
        dropped=len(steps) - len(kept),
    )


def expand_parent(parent: Node, B_d: int, policy: Policy, retriever: Retriever, config: RolloutConfig,
                  *, state: AgentState, parent_index: int = 0, first_id: int = 1) -> ExpansionResult:
    """Sample ``B_d`` children of one parent and decide which search children survive.

    At the depth cap every child is a leaf and nothing is retained.
    ``first_id`` is the id given to the first surviving child.
    """
    if parent.depth >= config.D:
        raise ValueError(f"parent at depth {parent.depth} cannot be expanded (D={config.D})")
    if parent.status is not NodeStatus.RETAINED and not parent.is_root:
        raise ValueError(f"parent {parent.node_id} is {parent.status.value}, not retained")
    depth = parent.depth + 1
    steps = [_sample_child(state, policy, retriever, config, depth, parent_index, j) for j in range(B_d)]
    return _assemble(parent, steps, config, parent_index, first_id)


def build_tree(question: Question, policy: Policy, retriever: Retriever, config: RolloutConfig,
               template: str = DEFAULT_PROMPT, context: Optional[PromptContext] = None) -> Tree:
    """Run every layer of generate-then-prune and return the frozen tree."""
    ctx = context if context is not None else PromptContext(template, question)
    root = Node(0, None, 0, None, NodeStatus.RETAINED)
    nodes: dict[NodeId, Node] = {0: root}
    states: dict[NodeId, AgentState] = {0: AgentState(ctx, (), config.D)}
    layers: list[tuple[NodeId, ...]] = [(0,)]
    branching: list[int] = []
    executor = ThreadPoolExecutor(config.max_workers) if config.max_workers > 1 else None
    try:
        for d in range(1, config.D + 1):
            parents = layers[-1]
            if not parents:
                break
            if config.fixed_branching is not None:
                B = config.fixed_branching[d - 1]
            else:
                B = compute_branching(config.N, len(parents))
            branching.append(B)
            jobs = [(pi, j) for pi in range(len(parents)) for j in range(B)]

            def run(job, parents=parents, d=d):
                pi, j = job
                return _sample_child(states[parents[pi]], policy, retriever, config, d, pi, j)

            flat = list(executor.map(run, jobs)) if executor else [run(job) for job in jobs]
            retained: list[NodeId] = []
            next_id = max(nodes) + 1
            for pi, pid in enumerate(parents):
                res = _assemble(nodes[pid], flat[pi * B:(pi + 1) * B], config, pi, next_id)
                next_id += len(res.children)
                for c in res.children:
                    nodes[c.node_id] = c
                    if c.status is NodeStatus.RETAINED:
                        states[c.node_id] = append_step(states[pid], c.step)
                retained.extend(c.node_id for c in res.retained)
            layers.append(tuple(retained))
    finally:
        if executor is not None:
            executor.shutdown()
    return Tree(ctx, 0, nodes, tuple(layers), config.D, tuple(branching))


def layer_states(tree: Tree) -> list[LayerState]:
    """Per-layer bookkeeping recomputed from a finished tree."""
    out = []
    for d, B in enumerate(tree.branching, start=1):
        generated = sum(1 for n in tree.nodes.values() if n.depth == d)
        parents = tree.layers[d - 1]
        out.append(LayerState(d, parents, B, len(parents) * B, generated))
    return out
