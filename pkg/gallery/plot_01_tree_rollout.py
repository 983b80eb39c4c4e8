"""
Growing one rollout tree
========================

A tabular policy with uniform logits explores a synthetic two-hop question.
Each layer samples ``ceil(N / |parents|)`` children per retained parent,
turns answers into leaves and keeps at most ``N_retain`` search children per
parent. We print the per-layer budget and the first few trajectories.
"""

import numpy as np

from treeps.credit import credit_tree
from treeps.env import EnvConfig, SimRetriever, generate_corpus
from treeps.experience import enumerate_paths
from treeps.export import tree_to_dot, tree_to_json
from treeps.policy import TabularPolicy
from treeps.tree import RolloutConfig, build_tree, layer_states

corpus, questions = generate_corpus(EnvConfig(seed=0, num_chains=4, hop_count=2))
q = questions[0]
print(q.text, "->", q.gold_answer)

###############################################################################
# Build the tree. The seed fixes every sample, so rerunning prints the same.
cfg = RolloutConfig(N=8, D=4, N_retain=2, seed=1)
tree = build_tree(q, TabularPolicy(corpus), SimRetriever(corpus), cfg)

for s in layer_states(tree):
    print(f"depth {s.depth}: {len(s.parents)} parents x B={s.branching} -> {s.generated} children")

###############################################################################
# Leaves carry exact-match rewards, internal nodes the mean of their leaves.
rewards, credits = credit_tree(tree)
print("V(root) =", credits[0].value, "over", credits[0].leaf_count, "leaves")

for traj in enumerate_paths(tree)[:4]:
    templates = [s.action.template for s in traj.steps]
    print(traj.leaf_node_id, templates, "reward", rewards[traj.leaf_node_id].reward)

###############################################################################
# The same tree as Graphviz source.
dot = tree_to_dot(tree_to_json(tree, credits, cfg.digest()))
print("\n".join(dot.splitlines()[:8]), "\n...")
print("advantages:", np.round([c.advantage for c in credits.values() if c.advantage is not None][:8], 3))
