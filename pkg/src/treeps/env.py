"""A small deterministic multi-hop QA world with a lexical retriever.

Each question is a chain of relation facts ``e0 -r1-> e1 -r2-> ... -> e_h``
and asks for ``e_h`` given ``e0`` and the relations. Every fact lives in its
own passage. Distractor passages reuse a chain entity with a different
relation, so they look relevant to a bag-of-words retriever but lead nowhere.

Retrieval scores passages by the number of distinct normalized terms they
share with the query; ties go to the lower passage id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .core import ANSWER, SEARCH, Action, Observation, Passage, Question, Step
from .credit import normalize_answer
from .errors import ConfigError

RELATIONS = (
    "founder", "director", "spouse", "mentor", "rival",
    "employer", "sibling", "successor", "publisher", "architect",
)
_SYLLABLES = (
    "ka", "lo", "mi", "ren", "tor", "va", "shi", "gal", "bem", "dru",
    "fen", "ix", "jor", "nel", "pa", "quo", "sul", "tam", "ul", "zed",
)

SEARCH_TEMPLATES = ("search_next", "search_question", "search_entity")
ANSWER_TEMPLATES = ("answer_current", "answer_guess")
TEMPLATES = SEARCH_TEMPLATES + ANSWER_TEMPLATES


@dataclass(frozen=True)
class EnvConfig:
    seed: int = 0
    num_chains: int = 4
    hop_count: int = 2
    distractors_per_chain: int = 3
    K: int = 3
    passage_token_cap: int = 512

    def __post_init__(self):
        for name in ("num_chains", "hop_count", "distractors_per_chain", "K", "passage_token_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hop_count > 4:
            raise ConfigError("hop_count must lie in [1, 4]")


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str


@dataclass(frozen=True)
class Chain:
    question_id: str
    entities: tuple[str, ...]  # e0 .. e_h
    relations: tuple[str, ...]  # r1 .. r_h
    gold_passage_ids: tuple[str, ...]

    @property
    def hop_count(self) -> int:
        return len(self.relations)


@dataclass(frozen=True)
class Corpus:
    passages: Mapping[str, Passage]
    facts: Mapping[str, Fact]  # passage id -> fact stated by that passage
    chains: Mapping[str, Chain]  # question id -> gold chain

    @cached_property
    def _terms(self) -> dict[str, frozenset[str]]:
        return {pid: frozenset(normalize_answer(p.text).split()) for pid, p in self.passages.items()}

    @cached_property
    def _sorted_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.passages))

    def __len__(self):
        return len(self.passages)


def question_text(start: str, relations: Sequence[str]) -> str:
    inner = start
    for rel in relations:
        inner = f"the {rel} of {inner}"
    return f"Who is {inner}?"


def _fact_text(f: Fact) -> str:
    return f"{f.object.capitalize()} is the {f.relation} of {f.subject.capitalize()}."


def generate_corpus(cfg: EnvConfig) -> tuple[Corpus, list[Question]]:
    """Build ``num_chains`` questions and a shuffled passage collection.

    The corpus holds ``num_chains * (hop_count + distractors_per_chain)``
    passages.
    """
    rng = np.random.default_rng(cfg.seed)
    used: set[str] = set()

    def fresh_entity() -> str:
        while True:
            name = "".join(rng.choice(_SYLLABLES, size=3).tolist())
            if name not in used and name not in RELATIONS:
                used.add(name)
                return name

    records: list[tuple[Fact, str | None, int | None]] = []  # fact, question id, hop index
    questions, chain_specs = [], []
    for c in range(cfg.num_chains):
        qid = f"q{c}"
        rels = tuple(rng.choice(RELATIONS, size=cfg.hop_count, replace=False).tolist())
        ents = tuple(fresh_entity() for _ in range(cfg.hop_count + 1))
        for h, rel in enumerate(rels):
            records.append((Fact(ents[h], rel, ents[h + 1]), qid, h))
        for _ in range(cfg.distractors_per_chain):
            h = int(rng.integers(cfg.hop_count))
            rel = str(rng.choice([r for r in RELATIONS if r != rels[h]]))
            records.append((Fact(ents[h], rel, fresh_entity()), None, None))
        questions.append(Question(qid, question_text(ents[0], rels), ents[-1]))
        chain_specs.append((qid, ents, rels))

    order = rng.permutation(len(records))
    passages, facts = {}, {}
    gold: dict[str, dict[int, str]] = {qid: {} for qid, _, _ in chain_specs}
    for new_idx, old_idx in enumerate(order.tolist()):
        fact, qid, h = records[old_idx]
        pid = f"p{new_idx:05d}"
        passages[pid] = Passage(pid, _fact_text(fact))
        facts[pid] = fact
        if qid is not None:
            gold[qid][h] = pid
    chains = {
        qid: Chain(qid, ents, rels, tuple(gold[qid][h] for h in range(len(rels))))
        for qid, ents, rels in chain_specs
    }
    corpus = Corpus(MappingProxyType(passages), MappingProxyType(facts), MappingProxyType(chains))
    return corpus, questions


def retrieve(query: str, corpus: Corpus, K: int = 3, token_cap: int = 512) -> Observation:
    """Top-K passages by term overlap; combined text cut at ``token_cap`` tokens.

    Truncation shortens passage texts but never drops a passage record, so the
    retrieved id set does not depend on the cap.
    """
    if not query.strip():
        raise ValueError("query must be nonempty")
    q = frozenset(normalize_answer(query).split())
    terms = corpus._terms
    ranked = sorted(corpus._sorted_ids, key=lambda pid: -len(q & terms[pid]))[:K]
    budget = token_cap
    out = []
    for pid in ranked:
        words = corpus.passages[pid].text.split()
        kept = words[: max(budget, 0)]
        budget -= len(kept)
        out.append(Passage(pid, " ".join(kept)))
    return Observation(tuple(out), token_cap - budget)


@dataclass(frozen=True)
class SimRetriever:
    """Callable retriever bound to a corpus."""

    corpus: Corpus
    K: int = 3
    token_cap: int = 512

    def __call__(self, query: str) -> Observation:
        return retrieve(query, self.corpus, self.K, self.token_cap)


def track_chain(corpus: Corpus, question_id: str, history: Sequence[Step]) -> tuple[str, int]:
    """Follow the question's relations through what has been retrieved so far.

    Returns the entity reached and the number of hops resolved. Only facts
    whose subject is the current entity and whose relation is the next one
    asked for advance the chain, which is what a careful reader would do.
    """
    chain = corpus.chains[question_id]
    current, hops = chain.entities[0], 0
    for step in history:
        if step.observation is None:
            continue
        progress = True
        while progress and hops < chain.hop_count:
            progress = False
            for p in step.observation.passages:
                f = corpus.facts.get(p.passage_id)
                if f and f.subject == current and f.relation == chain.relations[hops]:
                    current, hops, progress = f.object, hops + 1, True
                    break
    return current, hops


def instantiate(template: str, corpus: Corpus, question: Question, history: Sequence[Step]) -> tuple[str, Action]:
    """Turn a template name into (reasoning, action) for the given state."""
    chain = corpus.chains[question.id]
    current, hops = track_chain(corpus, question.id, history)
    if template == "search_next":
        rel = chain.relations[min(hops, chain.hop_count - 1)]
        query = f"{rel} of {current}" if hops < chain.hop_count else current
        return f"I need the {rel} of {current}.", Action(SEARCH, query, template)
    if template == "search_question":
        return "Search the whole question.", Action(SEARCH, question.text, template)
    if template == "search_entity":
        return f"Look up {current}.", Action(SEARCH, current, template)
    if template == "answer_current":
        return f"The chain leads to {current}.", Action(ANSWER, current, template)
    if template == "answer_guess":
        guess = chain.entities[0]
        last = next((s.observation for s in reversed(history) if s.observation), None)
        if last is not None:
            for p in last.passages:
                f = corpus.facts.get(p.passage_id)
                if f and f.object != current:
                    guess = f.object
                    break
        return "Take a guess from the last results.", Action(ANSWER, guess, template)
    raise KeyError(f"unknown template {template!r}")


def self_test(corpus: Corpus, questions: Sequence[Question], K: int = 3, token_cap: int = 512) -> list[str]:
    """Check every question is answerable by querying its gold chain in order.

    Also checks that no single passage names both the question entity and the
    answer for multi-hop chains. Returns a list of problems (empty when
    healthy).
    """
    problems = []
    for q in questions:
        chain = corpus.chains[q.id]
        for h, rel in enumerate(chain.relations):
            obs = retrieve(f"{rel} of {chain.entities[h]}", corpus, K, token_cap)
            if chain.gold_passage_ids[h] not in obs.passage_ids:
                problems.append(f"{q.id}: hop {h + 1} passage not retrieved by its gold query")
        if normalize_answer(q.gold_answer) != normalize_answer(chain.entities[-1]):
            problems.append(f"{q.id}: gold answer does not match chain end")
        if chain.hop_count >= 2:
            start, end = chain.entities[0], chain.entities[-1]
            for pid, terms in corpus._terms.items():
                if start in terms and end in terms:
                    problems.append(f"{q.id}: passage {pid} answers the question in one hop")
    return problems


def corpus_to_dict(corpus: Corpus, questions: Sequence[Question]) -> dict:
    return {
        "passages": [
            {"id": pid, "text": corpus.passages[pid].text, "fact": list(_astuple(corpus.facts[pid]))}
            for pid in sorted(corpus.passages)
        ],
        "questions": [
            {
                "id": q.id,
                "text": q.text,
                "gold_answer": q.gold_answer,
                "entities": list(corpus.chains[q.id].entities),
                "relations": list(corpus.chains[q.id].relations),
                "gold_passage_ids": list(corpus.chains[q.id].gold_passage_ids),
            }
            for q in questions
        ],
    }


def _astuple(f: Fact) -> tuple[str, str, str]:
    return (f.subject, f.relation, f.object)


def corpus_from_dict(doc: Mapping) -> tuple[Corpus, list[Question]]:
    passages = {p["id"]: Passage(p["id"], p["text"]) for p in doc["passages"]}
    facts = {p["id"]: Fact(*p["fact"]) for p in doc["passages"]}
    chains, questions = {}, []
    for q in doc["questions"]:
        chains[q["id"]] = Chain(q["id"], tuple(q["entities"]), tuple(q["relations"]), tuple(q["gold_passage_ids"]))
        questions.append(Question(q["id"], q["text"], q["gold_answer"]))
    corpus = Corpus(MappingProxyType(passages), MappingProxyType(facts), MappingProxyType(chains))
    return corpus, questions


def dumps_corpus(corpus: Corpus, questions: Sequence[Question]) -> str:
    return json.dumps(corpus_to_dict(corpus, questions), indent=2, ensure_ascii=False) + "\n"
