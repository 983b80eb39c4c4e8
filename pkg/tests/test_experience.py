import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import hand_tree
from oracles import random_tree
from treeps.core import ANSWER, SEARCH, Action, Observation, Passage, Step, Trajectory
from treeps.credit import RewardRecord, compute_advantages, credit_tree, estimate_values
from treeps.errors import EmptyPaths, MissingAdvantage
from treeps.experience import (
    ExperienceBatch, assign_token_advantages, dumps_batches, enumerate_paths, loads_batches, masked_fraction,
    sample_experience, step_segments, whitespace_tokenize,
)
from treeps.policy import TabularPolicy
from treeps.tree import RolloutConfig, build_tree


def test_paths_biject_with_leaves():
    tree, _ = hand_tree([[1, 0], 1])
    paths = enumerate_paths(tree)
    assert [p.leaf_node_id for p in paths] == tree.leaves() == [2, 3, 4]
    assert [p.node_ids for p in paths] == [(0, 1, 2), (0, 1, 3), (0, 4)]


def test_degenerate_and_chain_trees():
    star, _ = hand_tree([0] * 8)
    assert [len(p.steps) for p in enumerate_paths(star)] == [1] * 8
    chain, _ = hand_tree([[[[1]]]])
    (p,) = enumerate_paths(chain)
    assert len(p.steps) == 4


def test_sampling_counts_and_determinism():
    tree, _ = hand_tree([1, 0] * 6)
    paths = enumerate_paths(tree)
    b = sample_experience(paths, 8, np.random.default_rng(3))
    assert b.sampled_count == 8 and len({it.trajectory_id for it in b.items}) == 8
    assert b == sample_experience(paths, 8, np.random.default_rng(3))
    few = sample_experience(paths[:5], 8, np.random.default_rng(0))
    assert [it.trajectory.leaf_node_id for it in few.items] == [p.leaf_node_id for p in paths[:5]]
    with pytest.raises(EmptyPaths):
        sample_experience([], 8, np.random.default_rng(0))


def test_batch_size_is_min_of_n_and_leaves():
    rng = np.random.default_rng(9)
    for _ in range(30):
        tree, rewards = random_tree(rng, max_nodes=40)
        n = int(rng.integers(1, 12))
        b = sample_experience(enumerate_paths(tree), n, rng, rewards=rewards)
        assert b.sampled_count == min(n, len(tree.leaves()))


def _step(reasoning, payload, obs_words=0):
    obs = None
    if obs_words:
        obs = Observation((Passage("p1", " ".join(f"w{i}" for i in range(obs_words))),), obs_words)
    return Step(reasoning, Action(SEARCH if obs else ANSWER, payload), obs)


def test_broadcast_over_generated_tokens():
    s = _step("one two three four", "four five six seven")
    t = Trajectory("q", (s,), 1, (0, 1))
    recs = assign_token_advantages(t, {1: 0.5})
    assert len(recs) == 7
    assert all(r.advantage == 0.5 and r.loss_mask == 1 for r in recs)


def test_observation_tokens_masked():
    s = _step("r", "q", obs_words=38)
    gen, obs = step_segments(s)
    assert len(whitespace_tokenize(obs)) == 40
    recs = assign_token_advantages(Trajectory("q", (s,), 1, (0, 1)), {1: -0.25})
    masked = [r for r in recs if r.loss_mask == 0]
    assert len(masked) == 40 and all(r.advantage == 0.0 for r in masked)
    text = (gen + obs).encode()
    for r in recs:
        a, b = r.token_text_span
        assert text[a:b].decode() == (gen + obs).split()[r.token_index]


def test_shared_prefix_gets_identical_advantage():
    tree, rewards = hand_tree([[1, 0], 1])
    _, credits = credit_tree(tree)
    p1, p2 = enumerate_paths(tree)[:2]
    r1 = [r for r in assign_token_advantages(p1, credits) if r.step_index == 0]
    r2 = [r for r in assign_token_advantages(p2, credits) if r.step_index == 0]
    assert [r.advantage for r in r1] == [r.advantage for r in r2]


def test_missing_advantage():
    tree, _ = hand_tree([[1, 0], 1])
    with pytest.raises(MissingAdvantage):
        assign_token_advantages(enumerate_paths(tree)[0], {1: 0.1})


def test_masked_fraction_recomputable(world, retriever):
    corpus, qs = world
    tree = build_tree(qs[0], TabularPolicy(corpus), retriever, RolloutConfig(seed=5))
    _, credits = credit_tree(tree)
    recs, obs_tokens, all_tokens = [], 0, 0
    for p in enumerate_paths(tree):
        recs += assign_token_advantages(p, credits)
        for s in p.steps:
            gen, obs = step_segments(s)
            obs_tokens += len(obs.split())
            all_tokens += len(gen.split()) + len(obs.split())
    assert masked_fraction(recs) == pytest.approx(obs_tokens / all_tokens)
    assert masked_fraction([]) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_jsonl_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    tree, rewards = random_tree(rng, max_nodes=30)
    recs = {k: RewardRecord(k, "yes", v) for k, v in rewards.items()}
    credits = compute_advantages(tree, estimate_values(tree, recs))
    batch = sample_experience(enumerate_paths(tree), n, rng, credits=credits, rewards=recs)
    text = dumps_batches([batch, batch])
    back = loads_batches(text)
    # two consecutive batches of one question merge into one group on parse
    assert back == [ExperienceBatch(batch.question_id, batch.items * 2)]
    assert loads_batches(dumps_batches([batch])) == [batch]


def test_jsonl_real_tree_round_trip(world, retriever):
    corpus, qs = world
    batches = []
    for i, q in enumerate(qs[:3]):
        tree = build_tree(q, TabularPolicy(corpus), retriever, RolloutConfig(seed=i))
        rewards, credits = credit_tree(tree)
        batches.append(sample_experience(enumerate_paths(tree), 8, np.random.default_rng(i),
                                         credits=credits, rewards=rewards))
    assert loads_batches(dumps_batches(batches)) == batches
