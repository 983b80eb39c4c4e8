"""
Where process advantages come from
==================================

A scripted policy picks one of two first queries. After the good one the
answer is right 90% of the time, after the bad one 10%. Monte Carlo values
over the tree's leaves should separate the two first steps, and the
advantage combines the gap to the root with the gap to the parent.
"""

import numpy as np

from treeps.credit import credit_tree
from treeps.env import EnvConfig, SimRetriever, generate_corpus
from treeps.policy import ScriptedPolicy, ScriptRule
from treeps.tree import RolloutConfig, build_tree

corpus, questions = generate_corpus(EnvConfig(seed=0, num_chains=8, hop_count=2))
q = questions[0]
chain = corpus.chains[q.id]
retriever = SimRetriever(corpus)

good = "query:" + corpus.passages[chain.gold_passage_ids[0]].text
near = retriever(good[6:]).passage_ids | set(chain.gold_passage_ids)
bad = next("query:" + p.text for pid, p in sorted(corpus.passages.items())
           if not retriever(p.text).passage_ids & near)

policy = ScriptedPolicy((
    ScriptRule({good: 0.5, bad: 0.5}, depth=1),
    ScriptRule({"answer_correct": 0.9, "answer_wrong": 0.1}, first=good),
    ScriptRule({"answer_correct": 0.1, "answer_wrong": 0.9}, first=bad),
), corpus)

###############################################################################
# One tree in detail.
tree = build_tree(q, policy, retriever, RolloutConfig(seed=0))
_, credits = credit_tree(tree)
for nid in tree.layers[1]:
    c = credits[nid]
    label = "good" if tree.nodes[nid].step.action.template == good else "bad"
    print(f"{label:4s} node {nid}: V={c.value:.2f} |L|={c.leaf_count} A={c.advantage:+.3f} "
          f"(global {c.global_advantage:+.2f}, local {c.local_advantage:+.2f})")

###############################################################################
# Over many seeds the good step wins almost always.
gaps = []
for seed in range(100):
    tree = build_tree(q, policy, retriever, RolloutConfig(seed=seed))
    _, credits = credit_tree(tree)
    adv = {tree.nodes[n].step.action.template: credits[n].advantage for n in tree.layers[1]}
    if good in adv and bad in adv:
        gaps.append(adv[good] - adv[bad])
print(f"good beats bad in {np.mean(np.array(gaps) > 0):.0%} of {len(gaps)} trees, mean gap {np.mean(gaps):.3f}")
