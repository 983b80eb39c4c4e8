"""Turning a credited tree into training experience.

Every non-pruned leaf yields one root-to-leaf trajectory. ``N`` of them are
sampled uniformly without replacement; each step carries its node's
advantage, which is broadcast to the generated tokens of that step while
observation tokens are masked out.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import NodeId, Step, TagSet, Trajectory, Tree
from .errors import EmptyPaths, MissingAdvantage
from .policy import render_action, render_observation

# str -> list of (start, end) character offsets
Tokenizer = Callable[[str], list[tuple[int, int]]]


def whitespace_tokenize(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in re.finditer(r"\S+", text)]


def enumerate_paths(tree: Tree) -> list[Trajectory]:
    out = []
    for leaf in tree.leaves():
        path = tuple(tree.path_to(leaf))
        steps = tuple(tree.nodes[n].step for n in path[1:])
        out.append(Trajectory(tree.question.id, steps, leaf, path))
    return out


@dataclass(frozen=True)
class ExperienceItem:
    trajectory_id: str
    trajectory: Trajectory
    reward: float
    advantages: tuple[float, ...]  # one per step

    def with_advantages(self, advantages: Sequence[float]) -> "ExperienceItem":
        return ExperienceItem(self.trajectory_id, self.trajectory, self.reward, tuple(float(a) for a in advantages))


@dataclass(frozen=True)
class ExperienceBatch:
    question_id: str
    items: tuple[ExperienceItem, ...]

    @property
    def sampled_count(self) -> int:
        return len(self.items)

    @property
    def trajectories(self) -> list[Trajectory]:
        return [it.trajectory for it in self.items]


def _advantage_of(credits, node_id: NodeId) -> float:
    try:
        c = credits[node_id]
    except KeyError:
        raise MissingAdvantage(f"node {node_id} has no advantage") from None
    a = getattr(c, "advantage", c)
    if a is None:
        raise MissingAdvantage(f"node {node_id} has no advantage")
    return float(a)


def sample_experience(paths: Sequence[Trajectory], N: int, rng: np.random.Generator, *,
                      credits: Optional[Mapping] = None,
                      rewards: Optional[Mapping] = None) -> ExperienceBatch:
    """Pick ``min(N, len(paths))`` trajectories uniformly without replacement.

    With fewer than ``N`` paths all of them are taken, never duplicated.
    Selected trajectories keep leaf order. ``credits`` (node -> NodeCredit or
    float) fills per-step advantages and ``rewards`` (leaf -> RewardRecord or
    number) fills trajectory rewards; both default to zero when omitted.
    """
    if not paths:
        raise EmptyPaths("cannot sample experience from an empty path list")
    n = len(paths)
    idx = range(n) if N >= n else sorted(rng.choice(n, size=N, replace=False).tolist())
    items = []
    for i in idx:
        traj = paths[i]
        adv = tuple(_advantage_of(credits, nid) for nid in traj.node_ids[1:]) if credits is not None \
            else (0.0,) * len(traj.steps)
        r = 0.0
        if rewards is not None:
            rr = rewards[traj.leaf_node_id]
            r = float(getattr(rr, "reward", rr))
        items.append(ExperienceItem(f"{traj.question_id}/{traj.leaf_node_id}", traj, r, adv))
    return ExperienceBatch(paths[0].question_id, tuple(items))


# -- token-level view -------------------------------------------------------

@dataclass(frozen=True)
class TokenRecord:
    trajectory_id: str
    step_index: int
    token_index: int
    token_text_span: tuple[int, int]  # byte offsets into the step's serialized text
    advantage: float
    loss_mask: int


def step_segments(step: Step, tags: TagSet = TagSet()) -> tuple[str, str]:
    """(generated text, observation text) as they appear in the serialized step."""
    generated = render_action(step.reasoning, step.action, tags)
    obs = "" if step.observation is None else "\n" + render_observation(step.observation, tags) + "\n"
    return generated, obs


def _byte_spans(text: str, spans: Iterable[tuple[int, int]], offset: int) -> list[tuple[int, int]]:
    return [(offset + len(text[:a].encode()), offset + len(text[:b].encode())) for a, b in spans]


def assign_token_advantages(trajectory: Trajectory, credits: Mapping, tokenizer: Tokenizer = whitespace_tokenize,
                            *, trajectory_id: Optional[str] = None, tags: TagSet = TagSet()) -> list[TokenRecord]:
    """Broadcast each step's advantage over its generated tokens.

    ``credits`` maps node id to a NodeCredit or a bare float. Observation
    tokens get advantage 0 and mask 0.
    """
    tid = trajectory_id or f"{trajectory.question_id}/{trajectory.leaf_node_id}"
    out = []
    for i, (nid, step) in enumerate(zip(trajectory.node_ids[1:], trajectory.steps)):
        adv = _advantage_of(credits, nid)
        gen, obs = step_segments(step, tags)
        spans = [(s, 1) for s in _byte_spans(gen, tokenizer(gen), 0)]
        spans += [(s, 0) for s in _byte_spans(obs, tokenizer(obs), len(gen.encode()))]
        for t, (span, mask) in enumerate(spans):
            out.append(TokenRecord(tid, i, t, span, adv if mask else 0.0, mask))
    return out


def masked_fraction(records: Sequence[TokenRecord]) -> float:
    return sum(1 for r in records if r.loss_mask == 0) / len(records) if records else 0.0


# -- JSONL ------------------------------------------------------------------

def item_to_json(question_id: str, item: ExperienceItem, tokenizer: Tokenizer = whitespace_tokenize) -> dict:
    steps = []
    for nid, step, adv in zip(item.trajectory.node_ids[1:], item.trajectory.steps, item.advantages):
        gen, obs = step_segments(step)
        steps.append({
            "reasoning": step.reasoning,
            "action": step.action.to_dict(),
            "observation": None if step.observation is None else step.observation.to_dict(),
            "advantage": adv,
            "generated_token_count": len(tokenizer(gen)),
            "observation_token_count": len(tokenizer(obs)),
            "node_id": nid,
        })
    return {
        "question_id": question_id,
        "trajectory_id": item.trajectory_id,
        "reward": item.reward,
        "steps": steps,
        "node_ids": list(item.trajectory.node_ids),
    }


def dumps_batches(batches: Iterable[ExperienceBatch]) -> str:
    lines = []
    for b in batches:
        for it in b.items:
            lines.append(json.dumps(item_to_json(b.question_id, it), ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def loads_batches(text: str) -> list[ExperienceBatch]:
    """Parse JSONL back into batches, grouping consecutive lines by question."""
    groups: list[tuple[str, list[ExperienceItem]]] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        steps = tuple(Step.from_dict(s) for s in d["steps"])
        node_ids = tuple(d["node_ids"])
        traj = Trajectory(d["question_id"], steps, node_ids[-1], node_ids)
        item = ExperienceItem(d["trajectory_id"], traj, d["reward"], tuple(s["advantage"] for s in d["steps"]))
        if not groups or groups[-1][0] != d["question_id"]:
            groups.append((d["question_id"], []))
        groups[-1][1].append(item)
    return [ExperienceBatch(qid, tuple(items)) for qid, items in groups]
