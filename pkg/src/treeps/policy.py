"""Policies that propose the next (reasoning, action) pair.

Three implementations share one duck-typed contract,
``generate_step(state, temperature, rng) -> (reasoning, Action)``:

* :class:`ScriptedPolicy` follows a fixed probability table (tests).
* :class:`TabularPolicy` is a softmax over a finite set of action templates
  per state feature and is trainable.
* :class:`RemotePolicy` asks an HTTP text-generation endpoint and parses the
  tagged completion.
"""

from __future__ import annotations

import hashlib
import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .core import ANSWER, SEARCH, Action, AgentState, Observation, TagSet
from .env import TEMPLATES, Corpus, instantiate, track_chain
from .errors import MalformedGeneration, PolicyFailure, UnknownTemplate

DEFAULT_PROMPT = (
    "Answer the given question. You must conduct reasoning inside <reason> and </reason> "
    "first every time you get new information. After reasoning, if you find you lack some "
    "knowledge, you can call a search engine by <search> query </search> and it will return "
    "the top searched results between <information> and </information>. You can search as "
    "many times as you want. If you find no further external knowledge needed, you can "
    "directly provide the answer inside <answer> and </answer>, without detailed "
    "illustrations. For example, <answer> Beijing </answer>. Question: {input_question}\n"
)


class Policy(Protocol):
    def generate_step(self, state: AgentState, temperature: float, rng: np.random.Generator) -> tuple[str, Action]:
        ...


# -- tagged text ------------------------------------------------------------

def _span(tag: str) -> re.Pattern:
    return re.compile(rf"<{re.escape(tag)}>(.*?)</{re.escape(tag)}>", re.DOTALL)


def parse_action(raw: str, tags: TagSet = TagSet()) -> tuple[str, Action]:
    """Extract reasoning and the first complete search/answer tag pair.

    Reasoning is the first reason span before the action, or the untagged
    text preceding the action when no reason span exists. Anything after the
    action's closing tag is ignored.
    """
    found = []
    for kind, tag in ((SEARCH, tags.search), (ANSWER, tags.answer)):
        m = _span(tag).search(raw)
        if m is not None:
            found.append((m.start(), kind, m))
    if not found:
        raise MalformedGeneration(f"no complete <{tags.search}> or <{tags.answer}> pair in {raw[:80]!r}")
    start, kind, m = min(found, key=lambda t: t[0])
    payload = m.group(1).strip()
    if not payload:
        raise MalformedGeneration(f"empty <{kind}> payload")
    prefix = raw[:start]
    r = _span(tags.reason).search(prefix)
    if r is not None:
        reasoning = r.group(1).strip()
    else:
        reasoning = re.sub(r"<[^>]*>", " ", prefix)
        reasoning = " ".join(reasoning.split())
    return reasoning, Action(kind, payload)


def render_action(reasoning: str, action: Action, tags: TagSet = TagSet()) -> str:
    tag = tags.search if action.kind == SEARCH else tags.answer
    head = f"<{tags.reason}>{reasoning}</{tags.reason}>" if reasoning else ""
    return f"{head}<{tag}>{action.payload}</{tag}>"


def render_observation(obs: Observation, tags: TagSet = TagSet()) -> str:
    body = " ".join(f"Doc {i + 1}: {p.text}" for i, p in enumerate(obs.passages))
    return f"<{tags.information}>{body}</{tags.information}>"


def render_prompt(state: AgentState) -> str:
    tags = state.context.tags
    parts = [state.context.render()]
    for step in state.history:
        parts.append(render_action(step.reasoning, step.action, tags))
        if step.observation is not None:
            parts.append("\n" + render_observation(step.observation, tags) + "\n")
    return "".join(parts)


# -- scripted ---------------------------------------------------------------

@dataclass(frozen=True)
class ScriptRule:
    """Distribution over outcomes for nodes at ``depth`` (None = any depth).

    ``first`` restricts the rule to histories whose first action came from
    that outcome label. Outcomes are sim template names, ``answer_correct``,
    ``answer_wrong`` or ``query:<literal text>``.
    """

    dist: Mapping[str, float]
    depth: Optional[int] = None
    first: Optional[str] = None


@dataclass(frozen=True)
class ScriptedPolicy:
    rules: tuple[ScriptRule, ...]
    corpus: Optional[Corpus] = None

    def rule_for(self, state: AgentState) -> ScriptRule:
        depth = state.depth + 1
        first = state.history[0].action.template if state.history else None
        for rule in self.rules:
            if rule.depth is not None and rule.depth != depth:
                continue
            if rule.first is not None and rule.first != first:
                continue
            return rule
        raise PolicyFailure(f"no script rule for depth {depth}, first={first!r}")

    def generate_step(self, state: AgentState, temperature: float, rng: np.random.Generator) -> tuple[str, Action]:
        rule = self.rule_for(state)
        outcomes = list(rule.dist)
        p = np.asarray([rule.dist[o] for o in outcomes], dtype=float)
        choice = outcomes[int(rng.choice(len(outcomes), p=p / p.sum()))]
        q = state.context.question
        if choice == "answer_correct":
            return "scripted", Action(ANSWER, q.gold_answer, choice)
        if choice == "answer_wrong":
            return "scripted", Action(ANSWER, "no idea", choice)
        if choice.startswith("query:"):
            return "scripted", Action(SEARCH, choice[len("query:"):], choice)
        if self.corpus is None:
            raise PolicyFailure(f"outcome {choice!r} needs a corpus")
        reasoning, action = instantiate(choice, self.corpus, q, state.history)
        return reasoning, action


# -- tabular softmax --------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


@dataclass
class TabularPolicy:
    """Softmax over action templates, one logit row per state feature.

    The feature of a state is ``(depth, hops resolved so far)``; the row
    index is ``depth * (max_hops + 1) + hops``. Log-probabilities used for
    training are taken at temperature 1; ``generate_step`` samples at the
    temperature it is given.
    """

    corpus: Corpus
    max_depth: int = 4
    templates: tuple[str, ...] = TEMPLATES
    theta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.max_hops = max((c.hop_count for c in self.corpus.chains.values()), default=1)
        shape = (self.max_depth * (self.max_hops + 1), len(self.templates))
        if self.theta is None:
            self.theta = np.zeros(shape)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != shape:
            raise ValueError(f"theta has shape {self.theta.shape}, expected {shape}")
        self._index = {t: i for i, t in enumerate(self.templates)}

    @property
    def num_features(self) -> int:
        return self.theta.shape[0]

    def feature(self, state: AgentState) -> int:
        return self.feature_of(state.context.question.id, state.history)

    def feature_of(self, question_id: str, history) -> int:
        _, hops = track_chain(self.corpus, question_id, history)
        return len(history) * (self.max_hops + 1) + hops

    def feature_name(self, f: int) -> str:
        d, h = divmod(f, self.max_hops + 1)
        return f"depth={d},hops={h}"

    def template_index(self, template: str) -> int:
        try:
            return self._index[template]
        except KeyError:
            raise UnknownTemplate(template) from None

    def probs(self, f: int, temperature: float = 1.0) -> np.ndarray:
        return softmax(self.theta[f] / temperature)

    def generate_step(self, state: AgentState, temperature: float, rng: np.random.Generator) -> tuple[str, Action]:
        p = self.probs(self.feature(state), temperature)
        template = self.templates[int(rng.choice(len(p), p=p))]
        return instantiate(template, self.corpus, state.context.question, state.history)

    def with_theta(self, theta: np.ndarray) -> "TabularPolicy":
        return TabularPolicy(self.corpus, self.max_depth, self.templates, np.array(theta, dtype=float))

    def digest(self) -> str:
        return parameter_digest(self.theta)

    def to_dict(self) -> dict:
        return {
            "templates": list(self.templates),
            "features": [self.feature_name(f) for f in range(self.num_features)],
            "max_depth": self.max_depth,
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping, corpus: Corpus) -> "TabularPolicy":
        return cls(corpus, d["max_depth"], tuple(d["templates"]), np.asarray(d["theta"], dtype=float))


def parameter_digest(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype=np.float64).tobytes()).hexdigest()[:16]


def action_logprob(policy: TabularPolicy, state_feature: int, action_template: str) -> float:
    return float(log_softmax(policy.theta[state_feature])[policy.template_index(action_template)])


# -- remote -----------------------------------------------------------------

@dataclass(frozen=True)
class RemoteEndpointConfig:
    base_url: str
    timeout: float = 60.0
    stop: tuple[str, ...] = ("</search>", "</answer>")
    temperature: float = 1.0
    max_tokens: int = 512

    def __post_init__(self):
        if not self.stop:
            raise ValueError("stop sequences must be nonempty")


def _cut_at_stop(text: str, stop: Sequence[str]) -> str:
    hits = [(text.find(s), s) for s in stop if s in text]
    if not hits:
        return text
    pos, s = min(hits)
    return text[: pos + len(s)]


def remote_generate(prompt: str, cfg: RemoteEndpointConfig) -> str:
    """POST ``{prompt, temperature, max_tokens, stop}`` and return ``text``.

    The returned text ends at the first stop sequence, which is kept. Every
    transport or schema problem surfaces as :class:`PolicyFailure`.
    """
    body = json.dumps({
        "prompt": prompt,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "stop": list(cfg.stop),
    }).encode("utf-8")
    req = urllib.request.Request(cfg.base_url, data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as e:
        raise PolicyFailure(f"endpoint returned HTTP {e.code}") from e
    except (urllib.error.URLError, TimeoutError, OSError) as e:
        raise PolicyFailure(f"endpoint unreachable: {e}") from e
    except ValueError as e:
        raise PolicyFailure("endpoint returned invalid JSON") from e
    if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
        raise PolicyFailure("response lacks a string 'text' field")
    text = _cut_at_stop(payload["text"], cfg.stop)
    words = text.split()
    if len(words) > cfg.max_tokens:
        text = " ".join(words[: cfg.max_tokens])
    return text


@dataclass(frozen=True)
class RemotePolicy:
    endpoint: RemoteEndpointConfig

    def generate_step(self, state: AgentState, temperature: float, rng: np.random.Generator) -> tuple[str, Action]:
        cfg = RemoteEndpointConfig(self.endpoint.base_url, self.endpoint.timeout, self.endpoint.stop,
                                   temperature, self.endpoint.max_tokens)
        raw = remote_generate(render_prompt(state), cfg)
        try:
            return parse_action(raw, state.context.tags)
        except MalformedGeneration as e:
            raise PolicyFailure(str(e)) from e
